//! Spatio-temporal relation encoding over individual features.
//!
//! The spatial encoder self-attends over the individuals of each frame
//! (time as the batch dimension); the temporal encoder self-attends over the
//! frames of each individual (space as the batch dimension). Neither adds a
//! positional encoding, so both are permutation-equivariant along their
//! sequence axis. The default wiring is spatial-then-temporal followed by a
//! mean over time; the alternative fusions are config-selectable so the
//! structure comparison can be re-run at toy scale.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{encoder_layer, encoder_layer_specs, encoder_stack, encoder_stack_specs, ParamSpec};
use crate::ops;
use crate::params::ParamStore;

/// How the spatial and temporal branches combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StructureKind {
    Serial,
    Parallel,
    ParallelThenSerial,
    OneCross,
    TwoCross,
}

impl StructureKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "serial" => Ok(Self::Serial),
            "parallel" => Ok(Self::Parallel),
            "parallel_then_serial" => Ok(Self::ParallelThenSerial),
            "one_cross" => Ok(Self::OneCross),
            "two_cross" => Ok(Self::TwoCross),
            other => Err(Error::Config(format!("unknown structure `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Serial => "serial",
            Self::Parallel => "parallel",
            Self::ParallelThenSerial => "parallel_then_serial",
            Self::OneCross => "one_cross",
            Self::TwoCross => "two_cross",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SpatioTemporalConfig {
    pub layers: usize,
    pub heads: usize,
    pub structure: StructureKind,
}

impl Default for SpatioTemporalConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 8,
            structure: StructureKind::Serial,
        }
    }
}

pub fn spatiotemporal_specs(cfg: &SpatioTemporalConfig, d: usize) -> Vec<ParamSpec> {
    let mut specs = encoder_stack_specs("st.spatial", d, cfg.layers, false);
    specs.extend(encoder_stack_specs("st.temporal", d, cfg.layers, false));
    match cfg.structure {
        StructureKind::ParallelThenSerial => {
            specs.extend(encoder_stack_specs("st.spatial2", d, cfg.layers, false));
            specs.extend(encoder_stack_specs("st.temporal2", d, cfg.layers, false));
        }
        StructureKind::OneCross => {
            specs.extend(encoder_layer_specs("st.cross1", d, true));
        }
        StructureKind::TwoCross => {
            specs.extend(encoder_layer_specs("st.cross1", d, true));
            specs.extend(encoder_layer_specs("st.cross2", d, true));
        }
        _ => {}
    }
    specs
}

/// Per-frame self-attention over individuals: `[T,N,D] -> [T,N,D]`.
pub fn spatial_encode(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    cfg: &SpatioTemporalConfig,
) -> Result<Var> {
    expect_rank3(g, x)?;
    encoder_stack(g, store, "st.spatial", x, cfg.layers, cfg.heads)
}

/// Per-individual self-attention over frames: `[T,N,D] -> [N,T,D]`.
pub fn temporal_encode(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    cfg: &SpatioTemporalConfig,
) -> Result<Var> {
    expect_rank3(g, x)?;
    let xt = ops::permute(g, x, &[1, 0, 2])?;
    encoder_stack(g, store, "st.temporal", xt, cfg.layers, cfg.heads)
}

fn expect_rank3(g: &Graph, x: Var) -> Result<()> {
    if g.value(x).rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "expected [T,N,D], got {:?}",
            g.value(x).shape()
        )));
    }
    Ok(())
}

/// Full spatio-temporal encoding `[T,N,D] -> [N,D]`: branch combination per
/// the configured structure, then a mean over the time axis.
pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    cfg: &SpatioTemporalConfig,
) -> Result<Var> {
    expect_rank3(g, x)?;
    let fused = match cfg.structure {
        StructureKind::Serial => {
            let s = spatial_encode(g, store, x, cfg)?;
            temporal_encode(g, store, s, cfg)?
        }
        StructureKind::Parallel => {
            let s = spatial_encode(g, store, x, cfg)?;
            let s = ops::permute(g, s, &[1, 0, 2])?;
            let t = temporal_encode(g, store, x, cfg)?;
            ops::add(g, s, t)?
        }
        StructureKind::ParallelThenSerial => {
            let s = spatial_encode(g, store, x, cfg)?;
            let s = ops::permute(g, s, &[1, 0, 2])?;
            let t = temporal_encode(g, store, x, cfg)?;
            let y = ops::add(g, s, t)?;
            let y = ops::permute(g, y, &[1, 0, 2])?; // back to [T,N,D]
            let s2 = encoder_stack(g, store, "st.spatial2", y, cfg.layers, cfg.heads)?;
            let s2 = ops::permute(g, s2, &[1, 0, 2])?;
            encoder_stack(g, store, "st.temporal2", s2, cfg.layers, cfg.heads)?
        }
        StructureKind::OneCross => {
            let s = spatial_encode(g, store, x, cfg)?;
            let s = ops::permute(g, s, &[1, 0, 2])?;
            let t = temporal_encode(g, store, x, cfg)?;
            encoder_layer(g, store, "st.cross1", s, Some(t), cfg.heads)?
        }
        StructureKind::TwoCross => {
            let s = spatial_encode(g, store, x, cfg)?;
            let s = ops::permute(g, s, &[1, 0, 2])?;
            let t = temporal_encode(g, store, x, cfg)?;
            let a = encoder_layer(g, store, "st.cross1", s, Some(t), cfg.heads)?;
            let b = encoder_layer(g, store, "st.cross2", t, Some(s), cfg.heads)?;
            ops::add(g, a, b)?
        }
    };
    // fused: [N,T,D]; average the time dimension
    ops::mean_axis(g, fused, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::register;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &SpatioTemporalConfig, d: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        register(&mut store, &spatiotemporal_specs(cfg, d), seed);
        store
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::new(
            shape.to_vec(),
            (0..shape.iter().product::<usize>())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn small_cfg(structure: StructureKind) -> SpatioTemporalConfig {
        SpatioTemporalConfig {
            layers: 1,
            heads: 2,
            structure,
        }
    }

    #[test]
    fn spatial_is_per_frame() {
        let cfg = small_cfg(StructureKind::Serial);
        let store = setup(&cfg, 6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x_t = random_tensor(&mut rng, &[2, 3, 6]);

        let mut g = Graph::new(0);
        let x = g.input(x_t.clone()).unwrap();
        let y = spatial_encode(&mut g, &store, x, &cfg).unwrap();

        // per-frame oracle: encode each frame alone
        for t in 0..2 {
            let frame =
                Tensor::new(vec![1, 3, 6], x_t.data()[t * 18..(t + 1) * 18].to_vec()).unwrap();
            let mut g2 = Graph::new(0);
            let xf = g2.input(frame).unwrap();
            let yf = spatial_encode(&mut g2, &store, xf, &cfg).unwrap();
            for n in 0..3 {
                for dd in 0..6 {
                    let a = g.value(y).at(&[t, n, dd]);
                    let b = g2.value(yf).at(&[0, n, dd]);
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn temporal_is_per_individual() {
        let cfg = small_cfg(StructureKind::Serial);
        let store = setup(&cfg, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x_t = random_tensor(&mut rng, &[3, 2, 6]);

        let mut g = Graph::new(0);
        let x = g.input(x_t.clone()).unwrap();
        let y = temporal_encode(&mut g, &store, x, &cfg).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3, 6]);

        for n in 0..2 {
            // one individual's track as a [T,1,D] clip
            let mut track = Vec::new();
            for t in 0..3 {
                track.extend_from_slice(
                    &x_t.data()[(t * 2 + n) * 6..(t * 2 + n + 1) * 6],
                );
            }
            let mut g2 = Graph::new(0);
            let xi = g2.input(Tensor::new(vec![3, 1, 6], track).unwrap()).unwrap();
            let yi = temporal_encode(&mut g2, &store, xi, &cfg).unwrap();
            for t in 0..3 {
                for dd in 0..6 {
                    let a = g.value(y).at(&[n, t, dd]);
                    let b = g2.value(yi).at(&[0, t, dd]);
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn spatial_permutation_equivariance() {
        let cfg = SpatioTemporalConfig {
            layers: 2,
            heads: 2,
            structure: StructureKind::Serial,
        };
        let store = setup(&cfg, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x_t = random_tensor(&mut rng, &[2, 4, 8]);
        let perm = [2usize, 0, 3, 1];

        let mut permuted = Tensor::zeros(&[2, 4, 8]);
        for t in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                for dd in 0..8 {
                    permuted.data_mut()[(t * 4 + dst) * 8 + dd] = x_t.at(&[t, src, dd]);
                }
            }
        }

        let mut g = Graph::new(0);
        let x = g.input(x_t).unwrap();
        let y = spatial_encode(&mut g, &store, x, &cfg).unwrap();
        let mut g2 = Graph::new(0);
        let xp = g2.input(permuted).unwrap();
        let yp = spatial_encode(&mut g2, &store, xp, &cfg).unwrap();

        for t in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                for dd in 0..8 {
                    let a = g2.value(yp).at(&[t, dst, dd]);
                    let b = g.value(y).at(&[t, src, dd]);
                    assert!((a - b).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn temporal_frame_permutation_equivariance() {
        let cfg = small_cfg(StructureKind::Serial);
        let store = setup(&cfg, 6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x_t = random_tensor(&mut rng, &[3, 2, 6]);
        let perm = [1usize, 2, 0];

        let mut permuted = Tensor::zeros(&[3, 2, 6]);
        for (dst, &src) in perm.iter().enumerate() {
            for n in 0..2 {
                for dd in 0..6 {
                    permuted.data_mut()[(dst * 2 + n) * 6 + dd] = x_t.at(&[src, n, dd]);
                }
            }
        }

        let mut g = Graph::new(0);
        let x = g.input(x_t).unwrap();
        let y = temporal_encode(&mut g, &store, x, &cfg).unwrap();
        let mut g2 = Graph::new(0);
        let xp = g2.input(permuted).unwrap();
        let yp = temporal_encode(&mut g2, &store, xp, &cfg).unwrap();

        for n in 0..2 {
            for (dst, &src) in perm.iter().enumerate() {
                for dd in 0..6 {
                    let a = g2.value(yp).at(&[n, dst, dd]);
                    let b = g.value(y).at(&[n, src, dd]);
                    assert!((a - b).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_frame_serial_mean_is_identity_over_frame() {
        let cfg = small_cfg(StructureKind::Serial);
        let store = setup(&cfg, 6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x_t = random_tensor(&mut rng, &[1, 3, 6]);

        let mut g = Graph::new(0);
        let x = g.input(x_t.clone()).unwrap();
        let out = encode(&mut g, &store, x, &cfg).unwrap();
        assert_eq!(g.value(out).shape(), &[3, 6]);

        let mut g2 = Graph::new(0);
        let x2 = g2.input(x_t).unwrap();
        let s = spatial_encode(&mut g2, &store, x2, &cfg).unwrap();
        let t = temporal_encode(&mut g2, &store, s, &cfg).unwrap();
        for n in 0..3 {
            for dd in 0..6 {
                let a = g.value(out).at(&[n, dd]);
                let b = g2.value(t).at(&[n, 0, dd]);
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_in_time_serial_equals_single_frame_output() {
        let cfg = small_cfg(StructureKind::Serial);
        let store = setup(&cfg, 6, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let frame = random_tensor(&mut rng, &[1, 3, 6]);
        let mut stacked = Vec::new();
        for _ in 0..3 {
            stacked.extend_from_slice(frame.data());
        }
        let x_t = Tensor::new(vec![3, 3, 6], stacked).unwrap();

        let mut g = Graph::new(0);
        let x = g.input(x_t).unwrap();
        let out = encode(&mut g, &store, x, &cfg).unwrap();

        let mut g2 = Graph::new(0);
        let xf = g2.input(frame).unwrap();
        let single = encode(&mut g2, &store, xf, &cfg).unwrap();

        assert!(g.value(out).max_abs_diff(g2.value(single)) <= 1e-10);
    }

    #[test]
    fn serial_matches_composed_sub_ops() {
        let cfg = small_cfg(StructureKind::Serial);
        let store = setup(&cfg, 6, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x_t = random_tensor(&mut rng, &[2, 3, 6]);

        let mut g = Graph::new(0);
        let x = g.input(x_t.clone()).unwrap();
        let out = encode(&mut g, &store, x, &cfg).unwrap();

        let mut g2 = Graph::new(0);
        let x2 = g2.input(x_t).unwrap();
        let s = spatial_encode(&mut g2, &store, x2, &cfg).unwrap();
        let t = temporal_encode(&mut g2, &store, s, &cfg).unwrap();
        let m = ops::mean_axis(&mut g2, t, 1).unwrap();
        assert!(g.value(out).max_abs_diff(g2.value(m)) < 1e-12);
    }

    #[test]
    fn all_structures_produce_n_by_d() {
        for structure in [
            StructureKind::Serial,
            StructureKind::Parallel,
            StructureKind::ParallelThenSerial,
            StructureKind::OneCross,
            StructureKind::TwoCross,
        ] {
            let cfg = small_cfg(structure);
            let store = setup(&cfg, 6, 15);
            let mut rng = ChaCha8Rng::seed_from_u64(16);
            let x_t = random_tensor(&mut rng, &[2, 4, 6]);
            let mut g = Graph::new(0);
            let x = g.input(x_t).unwrap();
            let out = encode(&mut g, &store, x, &cfg).unwrap();
            assert_eq!(g.value(out).shape(), &[4, 6], "structure {:?}", structure);
        }
    }

    #[test]
    fn structure_names_roundtrip() {
        for s in [
            StructureKind::Serial,
            StructureKind::Parallel,
            StructureKind::ParallelThenSerial,
            StructureKind::OneCross,
            StructureKind::TwoCross,
        ] {
            assert_eq!(StructureKind::parse(s.name()).unwrap(), s);
        }
        assert!(StructureKind::parse("spiral").is_err());
    }
}
