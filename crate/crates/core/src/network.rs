//! The trajectory network: a four-layer fully connected net, 32 neurons per
//! layer, tanh on the first three layers and a linear output scaled by a
//! fixed factor. It maps normalized time (plus optional constant control
//! inputs) to the 2N position components of all agents at once.
//!
//! The polynomial force-law parameters ride along in the same flat
//! trainable vector so one reverse sweep differentiates everything.
//! Flattening order, fixed because optimizer state depends on it:
//! per layer weights row-major then biases, layers first to last, then the
//! distancing `(a_k, n_k)` pairs, then the aligning `(b_k, m_k)` pairs.

use crate::autodiff::{Jet, Tape, Var};
use crate::forcemodel::{InteractionModel, ModelError, PolySeries};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const HIDDEN_WIDTH: usize = 32;
pub const N_LAYERS: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("checkpoint parse error: {0}")]
    Parse(String),
    #[error("unsupported checkpoint schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("checkpoint holds {found} values but the layout needs {expected}")]
    LengthMismatch { found: usize, expected: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Architecture and trainable-block sizes; fixes the flat vector layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkLayout {
    /// 1 (time) plus any constant control inputs.
    pub n_inputs: usize,
    pub n_agents: usize,
    /// Trainable distancing terms; 0 when the pattern fixes f = 0.
    pub k_f: usize,
    /// Trainable aligning terms; 0 when the pattern fixes g = 0.
    pub k_g: usize,
}

impl NetworkLayout {
    pub fn layer_dims(&self) -> [(usize, usize); N_LAYERS] {
        [
            (self.n_inputs, HIDDEN_WIDTH),
            (HIDDEN_WIDTH, HIDDEN_WIDTH),
            (HIDDEN_WIDTH, HIDDEN_WIDTH),
            (HIDDEN_WIDTH, 2 * self.n_agents),
        ]
    }

    pub fn n_theta(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum()
    }

    pub fn n_values(&self) -> usize {
        self.n_theta() + 2 * (self.k_f + self.k_g)
    }

    pub fn f_range(&self) -> std::ops::Range<usize> {
        let start = self.n_theta();
        start..start + 2 * self.k_f
    }

    pub fn g_range(&self) -> std::ops::Range<usize> {
        let start = self.n_theta() + 2 * self.k_f;
        start..start + 2 * self.k_g
    }
}

/// The flat trainable vector together with its layout and the fixed output
/// scale factor.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParameters {
    pub layout: NetworkLayout,
    pub scale_factor: f64,
    pub values: Vec<f64>,
}

impl NetworkParameters {
    /// Xavier-uniform weights, constant 0.1 biases, polynomial parameters
    /// uniform in `[-poly_range, poly_range]`. Deterministic in the seed.
    pub fn init(layout: NetworkLayout, scale_factor: f64, poly_range: f64, rng_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut values = Vec::with_capacity(layout.n_values());
        for (fan_in, fan_out) in layout.layer_dims() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                values.push(rng.gen_range(-bound..=bound));
            }
            for _ in 0..fan_out {
                values.push(0.1);
            }
        }
        for _ in 0..2 * (layout.k_f + layout.k_g) {
            values.push(rng.gen_range(-poly_range..=poly_range));
        }
        NetworkParameters {
            layout,
            scale_factor,
            values,
        }
    }

    /// Extract the interaction model from the polynomial blocks. Blocks the
    /// pattern fixed at zero come out as the zero series.
    pub fn extract_model(&self, cutoff_radius: Option<f64>) -> Result<InteractionModel, ModelError> {
        let series_from = |range: std::ops::Range<usize>| -> Result<PolySeries, ModelError> {
            if range.is_empty() {
                return Ok(PolySeries::zero());
            }
            let pairs: Vec<(f64, f64)> = self.values[range]
                .chunks_exact(2)
                .map(|c| (c[0], c[1]))
                .collect();
            PolySeries::from_pairs(&pairs)
        };
        let f = series_from(self.layout.f_range())?;
        let g = series_from(self.layout.g_range())?;
        InteractionModel::new(f, g, cutoff_radius)
    }
}

/// One agent's position jets.
#[derive(Clone, Copy, Debug)]
pub struct AgentJet {
    pub x: Jet,
    pub y: Jet,
}

/// Value and first two physical-time derivatives of one output component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeJet {
    pub value: f64,
    pub first: f64,
    pub second: f64,
}

/// Record the network forward pass on a tape whose leaves are the flat
/// parameter vector. `t_normalized` is the time input in [-1, 1]; the
/// returned jets carry derivatives with respect to physical time (the
/// 2/horizon chain-rule factor is seeded into the time input).
pub fn forward_on_tape(
    layout: &NetworkLayout,
    scale_factor: f64,
    tape: &mut Tape,
    params: &[Var],
    t_normalized: f64,
    horizon: f64,
    controls: &[f64],
) -> Vec<AgentJet> {
    debug_assert_eq!(params.len(), layout.n_values());
    debug_assert_eq!(1 + controls.len(), layout.n_inputs);

    let mut activations: Vec<Jet> = Vec::with_capacity(layout.n_inputs);
    activations.push(Jet::time_input(tape, t_normalized, 2.0 / horizon));
    for &c in controls {
        activations.push(Jet::constant(tape, c));
    }

    let mut offset = 0;
    for (layer, (fan_in, fan_out)) in layout.layer_dims().into_iter().enumerate() {
        let weights = &params[offset..offset + fan_in * fan_out];
        let biases = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;

        let mut next: Vec<Jet> = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let mut acc = Jet::from_leaf(tape, biases[o]);
            for (i, &input) in activations.iter().enumerate() {
                let term = Jet::scale_by(tape, input, weights[o * fan_in + i]);
                acc = Jet::add(tape, acc, term);
            }
            if layer + 1 < N_LAYERS {
                acc = Jet::tanh(tape, acc);
            } else {
                acc = Jet::mul_const(tape, acc, scale_factor);
            }
            next.push(acc);
        }
        activations = next;
    }

    activations
        .chunks_exact(2)
        .map(|pair| AgentJet {
            x: pair[0],
            y: pair[1],
        })
        .collect()
}

/// Evaluate position jets at one time without keeping the tape around.
/// Returns `2 * n_agents` components ordered `x_0, y_0, x_1, y_1, ...`.
pub fn forward_jet(
    params: &NetworkParameters,
    t_normalized: f64,
    horizon: f64,
    controls: &[f64],
) -> Vec<TimeJet> {
    let mut tape = Tape::new();
    let vars = tape.leaves(&params.values);
    let jets = forward_on_tape(
        &params.layout,
        params.scale_factor,
        &mut tape,
        &vars,
        t_normalized,
        horizon,
        controls,
    );
    jets.iter()
        .flat_map(|aj| [aj.x, aj.y])
        .map(|j| TimeJet {
            value: tape.value(j.v),
            first: tape.value(j.d1),
            second: tape.value(j.d2),
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u32,
    layout: NetworkLayout,
    scale_factor: f64,
    rng_seed: u64,
    values: Vec<f64>,
}

const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Dump parameters plus architecture metadata and the originating RNG seed.
/// Round-trips exactly.
pub fn save_checkpoint(params: &NetworkParameters, rng_seed: u64) -> String {
    let file = CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        layout: params.layout,
        scale_factor: params.scale_factor,
        rng_seed,
        values: params.values.clone(),
    };
    let mut s = serde_json::to_string(&file).expect("checkpoint serialization");
    s.push('\n');
    s
}

pub fn load_checkpoint(text: &str) -> Result<(NetworkParameters, u64), NetworkError> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| NetworkError::Parse(e.to_string()))?;
    if file.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(NetworkError::SchemaVersion {
            found: file.schema_version,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let expected = file.layout.n_values();
    if file.values.len() != expected {
        return Err(NetworkError::LengthMismatch {
            found: file.values.len(),
            expected,
        });
    }
    Ok((
        NetworkParameters {
            layout: file.layout,
            scale_factor: file.scale_factor,
            values: file.values,
        },
        file.rng_seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_layout() -> NetworkLayout {
        NetworkLayout {
            n_inputs: 1,
            n_agents: 3,
            k_f: 2,
            k_g: 0,
        }
    }

    #[test]
    fn layout_counts() {
        let l = small_layout();
        // 1*32+32 + 32*32+32 + 32*32+32 + 32*6+6
        assert_eq!(l.n_theta(), 64 + 1056 + 1056 + 198);
        assert_eq!(l.n_values(), l.n_theta() + 4);
        assert_eq!(l.f_range(), l.n_theta()..l.n_theta() + 4);
        assert!(l.g_range().is_empty());
    }

    #[test]
    fn init_is_deterministic_with_constant_biases() {
        let a = NetworkParameters::init(small_layout(), 4.0, 1.0, 7);
        let b = NetworkParameters::init(small_layout(), 4.0, 1.0, 7);
        assert_eq!(a, b);
        let c = NetworkParameters::init(small_layout(), 4.0, 1.0, 8);
        assert_ne!(a, c);

        // every bias is exactly 0.1
        let mut offset = 0;
        for (fan_in, fan_out) in small_layout().layer_dims() {
            for b_idx in 0..fan_out {
                assert_eq!(a.values[offset + fan_in * fan_out + b_idx], 0.1);
            }
            offset += fan_in * fan_out + fan_out;
        }
        // polynomial block within the init range
        for &v in &a.values[small_layout().f_range()] {
            assert!(v.abs() <= 1.0);
        }
    }

    #[test]
    fn poly_range_respected_for_aligning_patterns() {
        let layout = NetworkLayout {
            n_inputs: 2,
            n_agents: 3,
            k_f: 0,
            k_g: 4,
        };
        let p = NetworkParameters::init(layout, 10.0, 0.1, 3);
        for &v in &p.values[layout.g_range()] {
            assert!(v.abs() <= 0.1);
        }
    }

    #[test]
    fn zero_weight_network_is_constant_in_time() {
        let layout = small_layout();
        let mut params = NetworkParameters::init(layout, 2.0, 1.0, 0);
        // zero all weights, keep biases
        let mut offset = 0;
        for (fan_in, fan_out) in layout.layer_dims() {
            for w in 0..fan_in * fan_out {
                params.values[offset + w] = 0.0;
            }
            offset += fan_in * fan_out + fan_out;
        }
        let jets_a = forward_jet(&params, -0.5, 10.0, &[]);
        let jets_b = forward_jet(&params, 0.8, 10.0, &[]);
        for (a, b) in jets_a.iter().zip(&jets_b) {
            assert_eq!(a.value, b.value);
            assert_eq!(a.first, 0.0);
            assert_eq!(a.second, 0.0);
        }
        // constant output is bias 0.1 times the scale factor
        assert_relative_eq!(jets_a[0].value, 0.1 * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn near_linear_network_derivative_matches_slope() {
        // with tiny weights tanh is effectively identity, so the network is
        // an affine chain; d/dt must be (product of weights) * (2/T)
        let layout = NetworkLayout {
            n_inputs: 1,
            n_agents: 1,
            k_f: 0,
            k_g: 0,
        };
        let mut params = NetworkParameters::init(layout, 1.0, 0.0, 0);
        for v in params.values.iter_mut() {
            *v = 0.0;
        }
        // one chain: input -> neuron 0 of each hidden layer -> output 0
        let eps = 1e-4;
        let dims = layout.layer_dims();
        let mut offset = 0;
        for (layer, (fan_in, fan_out)) in dims.into_iter().enumerate() {
            let w_index = match layer {
                0 => 0,             // weight (0, 0)
                _ => 0 * fan_in + 0, // row 0, col 0
            };
            params.values[offset + w_index] = eps;
            offset += fan_in * fan_out + fan_out;
        }
        let horizon = 8.0;
        let jets = forward_jet(&params, 0.1, horizon, &[]);
        let expected_slope = eps * eps * eps * eps * (2.0 / horizon);
        assert_relative_eq!(jets[0].first, expected_slope, max_relative = 1e-5);
    }

    #[test]
    fn jet_derivatives_match_finite_differences() {
        let layout = NetworkLayout {
            n_inputs: 2,
            n_agents: 2,
            k_f: 2,
            k_g: 2,
        };
        let params = NetworkParameters::init(layout, 3.0, 1.0, 11);
        let horizon = 12.0;
        let controls = [0.6];
        let h_phys = 1e-4;
        let h_norm = h_phys * 2.0 / horizon;
        for &t in &[-0.7, -0.2, 0.0, 0.4, 0.9] {
            let mid = forward_jet(&params, t, horizon, &controls);
            let plus = forward_jet(&params, t + h_norm, horizon, &controls);
            let minus = forward_jet(&params, t - h_norm, horizon, &controls);
            for k in 0..mid.len() {
                let fd1 = (plus[k].value - minus[k].value) / (2.0 * h_phys);
                let fd2 = (plus[k].value - 2.0 * mid[k].value + minus[k].value)
                    / (h_phys * h_phys);
                assert_relative_eq!(mid[k].first, fd1, max_relative = 1e-5, epsilon = 1e-10);
                assert_relative_eq!(mid[k].second, fd2, max_relative = 1e-4, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_exact() {
        let params = NetworkParameters::init(small_layout(), 4.0, 1.0, 19);
        let text = save_checkpoint(&params, 19);
        let (back, seed) = load_checkpoint(&text).unwrap();
        assert_eq!(back, params);
        assert_eq!(seed, 19);
    }

    #[test]
    fn checkpoint_rejects_length_mismatch() {
        let params = NetworkParameters::init(small_layout(), 4.0, 1.0, 19);
        let text = save_checkpoint(&params, 19);
        let mangled = text.replace("\"values\":[", "\"values\":[0.0,");
        assert!(matches!(
            load_checkpoint(&mangled),
            Err(NetworkError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn extract_model_reads_poly_blocks() {
        let layout = NetworkLayout {
            n_inputs: 1,
            n_agents: 2,
            k_f: 2,
            k_g: 1,
        };
        let mut params = NetworkParameters::init(layout, 1.0, 1.0, 0);
        let f_range = layout.f_range();
        params.values[f_range.start] = -0.5; // a_0
        params.values[f_range.start + 1] = 1.5; // n_0
        params.values[f_range.start + 2] = 0.25; // a_1
        params.values[f_range.start + 3] = -1.0; // n_1
        let g_range = layout.g_range();
        params.values[g_range.start] = 0.75;
        params.values[g_range.start + 1] = 0.0;
        let model = params.extract_model(Some(2.0)).unwrap();
        assert_eq!(model.distancing.terms().len(), 2);
        assert_eq!(model.distancing.terms()[0].coefficient, -0.5);
        assert_eq!(model.distancing.terms()[1].exponent, -1.0);
        assert_eq!(model.aligning.terms()[0].coefficient, 0.75);
        assert_eq!(model.cutoff_radius, Some(2.0));
    }
}
