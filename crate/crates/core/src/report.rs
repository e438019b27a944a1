//! Machine-readable score report.
//!
//! The report is a key/value document with exactly the ten score keys; each
//! value carries the raw double and the one-decimal percent, separated by a
//! space: `P_i = 0.8333333333333334 83.3`.

use crate::error::Result;
use crate::kv::{fmt_f64, KvDoc};
use crate::metrics::{percent_1dp, PanoramicScore};

pub const REPORT_KEYS: [&str; 10] = [
    "P_i", "R_i", "F_i", "P_p", "R_p", "F_p", "P_g", "R_g", "F_g", "F_a",
];

pub fn render_report(score: &PanoramicScore) -> String {
    let values = [
        score.individual.precision,
        score.individual.recall,
        score.individual.f1,
        score.social.precision,
        score.social.recall,
        score.social.f1,
        score.global.precision,
        score.global.recall,
        score.global.f1,
        score.overall_f1,
    ];
    let mut doc = KvDoc::new();
    for (key, value) in REPORT_KEYS.iter().zip(values) {
        doc.set(key, format!("{} {}", fmt_f64(value), percent_1dp(value)));
    }
    doc.render()
}

/// Raw doubles from a rendered report, in `REPORT_KEYS` order.
pub fn parse_report(text: &str) -> Result<Vec<f64>> {
    let doc = KvDoc::parse(text)?;
    let mut out = Vec::with_capacity(REPORT_KEYS.len());
    for key in REPORT_KEYS {
        let raw = doc.require(key)?;
        let first = raw.split_whitespace().next().unwrap_or("");
        out.push(first.parse().map_err(|_| {
            crate::error::Error::InvalidInput(format!("bad value for {key}: `{raw}`"))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{overall_score, Prf};

    #[test]
    fn report_has_exactly_the_ten_keys() {
        let score = overall_score(
            Prf::from_pr(0.5, 0.25),
            Prf::from_pr(1.0, 1.0),
            Prf::from_pr(0.0, 0.0),
        );
        let text = render_report(&score);
        let doc = crate::kv::KvDoc::parse(&text).unwrap();
        let keys: Vec<&str> = doc.entries().iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, REPORT_KEYS);
    }

    #[test]
    fn report_roundtrips_raw_doubles() {
        let score = overall_score(
            Prf::from_pr(1.0 / 3.0, 2.0 / 7.0),
            Prf::from_pr(0.9, 0.7),
            Prf::from_pr(0.123456789, 0.987654321),
        );
        let text = render_report(&score);
        let values = parse_report(&text).unwrap();
        assert_eq!(values[0], score.individual.precision);
        assert_eq!(values[2], score.individual.f1);
        assert_eq!(values[9], score.overall_f1);
    }
}
