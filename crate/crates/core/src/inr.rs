//! Coordinate network: positional encoding, an MLP with one skip
//! connection, and activation heads for the tissue channels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::rng::derive_seed;

/// Sin/cos frequency encoding applied per coordinate.
///
/// `frequencies = 0` disables the encoding entirely: points pass through
/// as raw coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub frequencies: usize,
    pub include_input: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            frequencies: 10,
            include_input: false,
        }
    }
}

impl EncodingConfig {
    /// Output columns for 3D points.
    pub fn encoded_dim(&self) -> usize {
        if self.frequencies == 0 {
            3
        } else {
            6 * self.frequencies + if self.include_input { 3 } else { 0 }
        }
    }
}

/// Per-coordinate frequency features, coordinate-major:
/// for each coordinate, (sin(2^f pi x), cos(2^f pi x)) for f = 0..L-1.
/// With `include_input`, the raw coordinates come first.
pub fn positional_encode<F: Scalar>(
    tape: &mut Tape<F>,
    points: Tensor,
    cfg: &EncodingConfig,
) -> Result<Tensor> {
    let shape = tape.shape(points).to_vec();
    if shape.len() != 2 || shape[1] != 3 {
        return Err(Error::BadRank {
            op: "positional_encode",
            expected: 2,
            shape,
        });
    }
    if cfg.frequencies == 0 {
        return Ok(points);
    }
    let mut parts = Vec::with_capacity(3 + 6 * cfg.frequencies);
    if cfg.include_input {
        parts.push(points);
    }
    for coord in 0..3 {
        let col = tape.slice_cols(points, coord, 1)?;
        for f in 0..cfg.frequencies {
            let freq = (1u64 << f) as f64 * std::f64::consts::PI;
            let scaled = tape.scale(col, freq);
            parts.push(tape.sin(scaled));
            parts.push(tape.cos(scaled));
        }
    }
    tape.concat(&parts, 1)
}

/// MLP body shape. `skip_layer` is the 1-based hidden layer whose input
/// is the previous activation concatenated with the encoded point; 0
/// disables the skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub skip_layer: usize,
    pub output_dim: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_layers: 8,
            width: 256,
            skip_layer: 5,
            output_dim: 5,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.width == 0 || self.output_dim == 0 {
            return Err(Error::config(format!(
                "mlp dimensions must be positive: {self:?}"
            )));
        }
        if self.skip_layer == 1 {
            return Err(Error::config(String::from(
                "skip_layer 1 is meaningless: the first layer already \
                 receives the encoding",
            )));
        }
        if self.skip_layer > self.hidden_layers {
            return Err(Error::config(format!(
                "skip_layer {} exceeds hidden_layers {}",
                self.skip_layer, self.hidden_layers
            )));
        }
        Ok(())
    }

    fn layer_in_dim(&self, layer: usize, encoded: usize) -> usize {
        if layer == 0 {
            encoded
        } else if self.skip_layer > 0 && layer == self.skip_layer - 1 {
            self.width + encoded
        } else {
            self.width
        }
    }
}

/// One named weight array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A coordinate network: encoding plus weights. Channel semantics live
/// in the activation helpers, not here.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub encoding: EncodingConfig,
    pub config: MlpConfig,
    pub params: Vec<Param>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, reproducible from `seed`.
    pub fn init(encoding: EncodingConfig, config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoded = encoding.encoded_dim();
        let mut params = Vec::new();
        let mut push_layer = |name: String, fan_in: usize, fan_out: usize, salt: u64| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, salt));
            let weight: Vec<f32> = (0..fan_in * fan_out)
                .map(|_| (rng.gen_range(-a..a)) as f32)
                .collect();
            params.push(Param {
                name: format!("{name}.weight"),
                shape: vec![fan_in, fan_out],
                data: weight,
            });
            params.push(Param {
                name: format!("{name}.bias"),
                shape: vec![fan_out],
                data: vec![0.0; fan_out],
            });
        };
        for layer in 0..config.hidden_layers {
            let fan_in = config.layer_in_dim(layer, encoded);
            push_layer(format!("hidden{layer}"), fan_in, config.width, layer as u64);
        }
        push_layer(
            "head".into(),
            config.width,
            config.output_dim,
            config.hidden_layers as u64,
        );
        Ok(Mlp {
            encoding,
            config,
            params,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Insert every weight array into the tape as a leaf, in parameter
    /// order. The returned handles feed `forward` and receive gradients.
    pub fn emit_params<F: Scalar>(&self, tape: &mut Tape<F>) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .map(|p| {
                let data = p.data.iter().map(|&v| F::from_f32(v)).collect();
                tape.leaf(data, p.shape.clone())
            })
            .collect()
    }

    /// Raw head outputs [N, output_dim] from encoded points [N, encoded].
    /// `params` must come from `emit_params` (or agree with its layout).
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &[Tensor],
        encoded: Tensor,
    ) -> Result<Tensor> {
        let expect = 2 * (self.config.hidden_layers + 1);
        if params.len() != expect {
            return Err(Error::config(format!(
                "expected {expect} weight tensors, got {}",
                params.len()
            )));
        }
        let mut h = encoded;
        for layer in 0..self.config.hidden_layers {
            if self.config.skip_layer > 0 && layer == self.config.skip_layer - 1 {
                h = tape.concat(&[h, encoded], 1)?;
            }
            let z = tape.matmul(h, params[2 * layer])?;
            let zb = tape.add_bias(z, params[2 * layer + 1])?;
            h = tape.relu(zb);
        }
        let head = tape.matmul(h, params[2 * self.config.hidden_layers])?;
        tape.add_bias(head, params[2 * self.config.hidden_layers + 1])
    }

    /// Encode + forward over already-normalized points.
    pub fn query<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        params: &[Tensor],
        normalized_points: &[Vec3],
    ) -> Result<Tensor> {
        let pts = points_leaf(tape, normalized_points)?;
        let encoded = positional_encode(tape, pts, &self.encoding)?;
        self.forward(tape, params, encoded)
    }
}

/// Normalized points as an [N, 3] constant leaf.
pub fn points_leaf<F: Scalar>(tape: &mut Tape<F>, points: &[Vec3]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(points.len() * 3);
    for p in points {
        data.push(F::from_f64(p.x));
        data.push(F::from_f64(p.y));
        data.push(F::from_f64(p.z));
    }
    tape.leaf(data, vec![points.len(), 3])
}

/// The five tissue channels as column tensors [N, 1], after their
/// activations: attenuation through |.| (non-negative, unbounded), the
/// rest through sigmoid (probabilities / normalized amplitudes).
#[derive(Debug, Clone, Copy)]
pub struct FieldTensors {
    pub attenuation: Tensor,
    pub reflectance: Tensor,
    pub border_prob: Tensor,
    pub scatter_density: Tensor,
    pub scatter_amplitude: Tensor,
}

/// Split a raw [N, 5] head output into activated tissue channels.
pub fn tissue_field<F: Scalar>(tape: &mut Tape<F>, raw: Tensor) -> Result<FieldTensors> {
    let shape = tape.shape(raw).to_vec();
    if shape.len() != 2 || shape[1] != 5 {
        return Err(Error::BadRank {
            op: "tissue_field",
            expected: 2,
            shape,
        });
    }
    let c0 = tape.slice_cols(raw, 0, 1)?;
    let c1 = tape.slice_cols(raw, 1, 1)?;
    let c2 = tape.slice_cols(raw, 2, 1)?;
    let c3 = tape.slice_cols(raw, 3, 1)?;
    let c4 = tape.slice_cols(raw, 4, 1)?;
    Ok(FieldTensors {
        attenuation: tape.abs(c0),
        reflectance: tape.sigmoid(c1),
        border_prob: tape.sigmoid(c2),
        scatter_density: tape.sigmoid(c3),
        scatter_amplitude: tape.sigmoid(c4),
    })
}

/// Single-channel intensity head (direct image prediction): sigmoid of a
/// raw [N, 1] output.
pub fn intensity_field<F: Scalar>(tape: &mut Tape<F>, raw: Tensor) -> Result<Tensor> {
    let shape = tape.shape(raw).to_vec();
    if shape.len() != 2 || shape[1] != 1 {
        return Err(Error::BadRank {
            op: "intensity_field",
            expected: 2,
            shape,
        });
    }
    Ok(tape.sigmoid(raw))
}
