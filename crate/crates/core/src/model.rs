//! Detector contract: a parameterized differentiable map from an image to a
//! same-resolution probability map, plus checkpoint (de)serialization.
//!
//! The reference network is a small fully-convolutional encoder with strided
//! downsampling and a top-down fusion path (lateral 1x1 projections,
//! upsample-add, 3x3 smoothing) ending in a 1x1 sigmoid head. Parameters
//! live in a flat vector addressed by the architecture id, which fully
//! encodes the layer plan.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::grid::{Grid, Image, ProbabilityMap};
use crate::losses::{bce_value, kl_value, LossHead};
use crate::nn::{self, Act, NetPlan, Real, Tensor};

/// Layer plan of the reference detector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    /// Encoder widths; index 0 is full resolution, each further stage halves
    /// the grid. `channels.len() - 1` is the number of downsampling scales.
    pub channels: Vec<usize>,
    /// Width of the top-down fusion path.
    pub fusion_channels: usize,
    pub kernel_size: usize,
    pub nonlinearity: Act,
}

impl Default for ArchitectureSpec {
    /// Two downsampling scales, ~30k parameters.
    fn default() -> Self {
        Self {
            channels: vec![13, 26, 52],
            fusion_channels: 26,
            kernel_size: 3,
            nonlinearity: Act::Relu,
        }
    }
}

impl ArchitectureSpec {
    pub fn scales(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn plan(&self) -> NetPlan {
        NetPlan {
            in_c: 1,
            channels: self.channels.clone(),
            fusion: self.fusion_channels,
            k: self.kernel_size,
            act: self.nonlinearity,
        }
    }

    pub fn param_count(&self) -> usize {
        self.plan().param_count()
    }

    /// Compact, parseable identifier, e.g. `fcn3-13x26x52-f26-relu`.
    pub fn id(&self) -> String {
        let chans = self
            .channels
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let act = match self.nonlinearity {
            Act::Relu => "relu",
            Act::Softplus => "softplus",
        };
        format!(
            "fcn{}-{}-f{}-{}",
            self.kernel_size, chans, self.fusion_channels, act
        )
    }

    pub fn parse(id: &str) -> Result<Self, ModelError> {
        let err = || ModelError::UnknownArchitecture { id: id.to_string() };
        let rest = id.strip_prefix("fcn").ok_or_else(err)?;
        let mut parts = rest.split('-');
        let k: usize = parts.next().ok_or_else(err)?.parse().map_err(|_| err())?;
        let channels: Vec<usize> = parts
            .next()
            .ok_or_else(err)?
            .split('x')
            .map(|c| c.parse().map_err(|_| err()))
            .collect::<Result<_, _>>()?;
        let fusion: usize = parts
            .next()
            .and_then(|f| f.strip_prefix('f'))
            .ok_or_else(err)?
            .parse()
            .map_err(|_| err())?;
        let nonlinearity = match parts.next().ok_or_else(err)? {
            "relu" => Act::Relu,
            "softplus" => Act::Softplus,
            _ => return Err(err()),
        };
        if parts.next().is_some() || channels.is_empty() || channels.len() < 2 {
            return Err(err());
        }
        if k % 2 == 0 || k == 0 {
            return Err(err());
        }
        Ok(Self {
            channels,
            fusion_channels: fusion,
            kernel_size: k,
            nonlinearity,
        })
    }
}

/// Flat parameter vector plus the architecture that interprets it.
///
/// Parameters are held in f64 so optimizer and EMA arithmetic keep double
/// precision; the on-disk format (and the compute path) is f32.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub architecture_id: String,
    pub step_index: u64,
    pub parameters: Vec<f64>,
}

impl ModelCheckpoint {
    pub fn arch(&self) -> Result<ArchitectureSpec, ModelError> {
        let arch = ArchitectureSpec::parse(&self.architecture_id)?;
        let expected = arch.param_count();
        if expected != self.parameters.len() {
            return Err(ModelError::ParameterCountMismatch {
                id: self.architecture_id.clone(),
                expected,
                actual: self.parameters.len(),
            });
        }
        Ok(arch)
    }

    pub fn params_f32(&self) -> Vec<f32> {
        self.parameters.iter().map(|&p| p as f32).collect()
    }
}

fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; u1 bounded away from 0.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic variance-scaled init. Hidden conv weights are He-normal,
/// biases zero; the head gets damped weights and a bias placing the initial
/// mean output near 0.1 (prior toward negative under heavy class imbalance).
pub fn init_parameters(arch: &ArchitectureSpec, seed: u64) -> ModelCheckpoint {
    let plan = arch.plan();
    let layout = plan.layout();
    let mut params = vec![0.0f64; plan.param_count()];
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x6d6f64656c_u64);
    let head_idx = layout.len() - 1;
    for (idx, (offset, sh)) in layout.iter().enumerate() {
        let fan_in = (sh.in_c * sh.k * sh.k) as f64;
        let mut std = (2.0 / fan_in).sqrt();
        if idx == head_idx {
            std *= 0.1;
        }
        for w in &mut params[*offset..offset + sh.weight_len()] {
            *w = std * standard_normal(&mut rng);
        }
        // biases stay zero
    }
    // logit(0.1)
    params[plan.head_bias_offset()] = (0.1f64 / 0.9).ln();
    ModelCheckpoint {
        architecture_id: arch.id(),
        step_index: 0,
        parameters: params,
    }
}

pub(crate) fn image_tensor<T: Real>(image: &Image) -> Tensor<T> {
    Tensor {
        c: 1,
        h: image.height(),
        w: image.width(),
        data: image.values().iter().map(|&v| T::from_f64(v as f64)).collect(),
    }
}

fn check_dims(arch: &ArchitectureSpec, image: &Image) -> Result<(), ModelError> {
    let div = 1usize << arch.scales();
    if image.height() % div != 0 || image.width() % div != 0 || image.height() == 0 {
        return Err(ModelError::ShapeError {
            height: image.height(),
            width: image.width(),
            scales: arch.scales(),
        });
    }
    Ok(())
}

/// Single-precision inference: image in, same-size probability map out.
pub fn forward(checkpoint: &ModelCheckpoint, image: &Image) -> Result<ProbabilityMap, ModelError> {
    let arch = checkpoint.arch()?;
    check_dims(&arch, image)?;
    let plan = arch.plan();
    let params = checkpoint.params_f32();
    let input = image_tensor::<f32>(image);
    let trace = nn::net_forward(&plan, &params, &input);
    let probs: Vec<f32> = trace.logits.data.iter().map(|&z| nn::sigmoid(z)).collect();
    let grid = Grid::from_vec(image.height(), image.width(), probs).expect("head preserves shape");
    Ok(ProbabilityMap::new(grid).expect("sigmoid output in (0,1)"))
}

/// Double-precision loss + parameter gradient for one image under a loss
/// head. The gradient is exact for the returned loss value (verified against
/// central finite differences in the test suite).
pub fn forward_with_gradients(
    checkpoint: &ModelCheckpoint,
    image: &Image,
    loss_tail: &LossHead,
) -> Result<(f64, Vec<f64>), ModelError> {
    let arch = checkpoint.arch()?;
    check_dims(&arch, image)?;
    let plan = arch.plan();
    let input = image_tensor::<f64>(image);
    let trace = nn::net_forward(&plan, &checkpoint.parameters, &input);
    let probs: Vec<f64> = trace.logits.data.iter().map(|&z| nn::sigmoid(z)).collect();
    let n = probs.len() as f64;

    let (loss, dlogits): (f64, Vec<f64>) = match loss_tail {
        LossHead::PixelwiseBce(mask) => {
            if mask.height() != image.height() || mask.width() != image.width() {
                return Err(ModelError::ShapeError {
                    height: mask.height(),
                    width: mask.width(),
                    scales: arch.scales(),
                });
            }
            let loss = bce_value(&probs, mask.values());
            let d = probs
                .iter()
                .zip(mask.values())
                .map(|(&p, &y)| (p - y as f64) / n)
                .collect();
            (loss, d)
        }
        LossHead::DistillKl(target) => {
            if target.height() != image.height() || target.width() != image.width() {
                return Err(ModelError::ShapeError {
                    height: target.height(),
                    width: target.width(),
                    scales: arch.scales(),
                });
            }
            let loss = kl_value(&probs, target.values());
            let d = probs
                .iter()
                .zip(target.values())
                .map(|(&p, &t)| (p - t as f64) / n)
                .collect();
            (loss, d)
        }
    };
    if !loss.is_finite() {
        return Err(ModelError::NumericalError {
            context: format!("loss = {loss} on a {}x{} input", image.height(), image.width()),
        });
    }
    let dlogits = Tensor {
        c: 1,
        h: image.height(),
        w: image.width(),
        data: dlogits,
    };
    let grads = nn::net_backward_with_input(&plan, &checkpoint.parameters, &input, &trace, &dlogits);
    Ok((loss, grads))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"AALSCP01";

/// Writes header (architecture id, parameter count, step index) followed by
/// the parameter block as little-endian f32.
pub fn save_checkpoint(checkpoint: &ModelCheckpoint, path: &Path) -> Result<(), ModelError> {
    checkpoint.arch()?;
    let mut buf = Vec::with_capacity(32 + checkpoint.parameters.len() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let id_bytes = checkpoint.architecture_id.as_bytes();
    buf.extend_from_slice(&(id_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(id_bytes);
    buf.extend_from_slice(&checkpoint.step_index.to_le_bytes());
    buf.extend_from_slice(&(checkpoint.parameters.len() as u64).to_le_bytes());
    for &p in &checkpoint.parameters {
        buf.extend_from_slice(&(p as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, ModelError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fail = |reason: &str| ModelError::MalformedCheckpoint {
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic"));
    }
    let id_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    if bytes.len() < pos + id_len + 16 {
        return Err(fail("truncated header"));
    }
    let architecture_id = std::str::from_utf8(&bytes[pos..pos + id_len])
        .map_err(|_| fail("architecture id not utf8"))?
        .to_string();
    pos += id_len;
    let step_index = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
    pos += 8;
    let count = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    if bytes.len() != pos + count * 4 {
        return Err(fail("parameter block length mismatch"));
    }
    let parameters = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let ckpt = ModelCheckpoint {
        architecture_id,
        step_index,
        parameters,
    };
    ckpt.arch()?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GtMask;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Grid::from_vec(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    /// Tiny two-scale architecture, 397 parameters.
    pub(crate) fn tiny_arch(act: Act) -> ArchitectureSpec {
        ArchitectureSpec {
            channels: vec![2, 3, 4],
            fusion_channels: 3,
            kernel_size: 3,
            nonlinearity: act,
        }
    }

    #[test]
    fn default_arch_is_about_30k_params() {
        let arch = ArchitectureSpec::default();
        assert_eq!(arch.param_count(), 30_109);
        assert_eq!(arch.id(), "fcn3-13x26x52-f26-relu");
    }

    #[test]
    fn arch_id_round_trip() {
        for arch in [ArchitectureSpec::default(), tiny_arch(Act::Softplus)] {
            assert_eq!(ArchitectureSpec::parse(&arch.id()).unwrap(), arch);
        }
        assert!(ArchitectureSpec::parse("resnet50").is_err());
        assert!(ArchitectureSpec::parse("fcn4-2x3-f2-relu").is_err());
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let arch = tiny_arch(Act::Relu);
        let a = init_parameters(&arch, 9);
        let b = init_parameters(&arch, 9);
        assert_eq!(a, b);
        assert_eq!(a.parameters.len(), arch.param_count());
        assert_eq!(a.parameters.len(), 397);
        let c = init_parameters(&arch, 10);
        assert_ne!(a.parameters, c.parameters);
    }

    #[test]
    fn initial_mean_output_biased_low() {
        let arch = ArchitectureSpec::default();
        for seed in 0..10u64 {
            let ckpt = init_parameters(&arch, seed);
            let image = random_image(seed + 100, 16, 16);
            let map = forward(&ckpt, &image).unwrap();
            let mean: f64 =
                map.values().iter().map(|&v| v as f64).sum::<f64>() / map.values().len() as f64;
            assert!((0.05..=0.2).contains(&mean), "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn zeroed_head_outputs_half() {
        let arch = tiny_arch(Act::Relu);
        let mut ckpt = init_parameters(&arch, 3);
        let plan = arch.plan();
        let (off, sh) = *plan.layout().last().unwrap();
        for p in &mut ckpt.parameters[off..off + sh.param_len()] {
            *p = 0.0;
        }
        let map = forward(&ckpt, &random_image(1, 8, 8)).unwrap();
        for &v in map.values() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn forward_shape_and_determinism() {
        let arch = tiny_arch(Act::Relu);
        let ckpt = init_parameters(&arch, 7);
        let image = random_image(2, 16, 12);
        let a = forward(&ckpt, &image).unwrap();
        let b = forward(&ckpt, &image).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.height(), a.width()), (16, 12));
        for &v in a.values() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn forward_rejects_indivisible_dims() {
        let arch = tiny_arch(Act::Relu);
        let ckpt = init_parameters(&arch, 7);
        let image = random_image(2, 10, 10);
        assert!(matches!(
            forward(&ckpt, &image),
            Err(ModelError::ShapeError { .. })
        ));
    }

    #[test]
    fn checkpoint_param_count_validated() {
        let arch = tiny_arch(Act::Relu);
        let mut ckpt = init_parameters(&arch, 7);
        ckpt.parameters.pop();
        assert!(matches!(
            ckpt.arch(),
            Err(ModelError::ParameterCountMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_file_round_trip_preserves_forward() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let arch = tiny_arch(Act::Relu);
        let ckpt = ModelCheckpoint {
            step_index: 41,
            ..init_parameters(&arch, 11)
        };
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step_index, 41);
        assert_eq!(loaded.architecture_id, ckpt.architecture_id);
        let image = random_image(3, 8, 8);
        // f32 rounding through the file must not change the f32 compute path
        assert_eq!(
            forward(&ckpt, &image).unwrap(),
            forward(&loaded, &image).unwrap()
        );
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let arch = tiny_arch(Act::Relu);
        let mut ckpt = init_parameters(&arch, 7);
        ckpt.parameters[0] = f64::NAN;
        let image = random_image(2, 8, 8);
        let mask = GtMask::zeros(8, 8);
        assert!(matches!(
            forward_with_gradients(&ckpt, &image, &LossHead::PixelwiseBce(&mask)),
            Err(ModelError::NumericalError { .. })
        ));
    }

    #[test]
    fn saturated_prediction_loss_matches_clamp_plateau() {
        // Prediction forced to eps everywhere with an all-zero mask: the loss
        // per pixel is -ln(1 - eps) and the gradient sits on the plateau.
        let arch = tiny_arch(Act::Relu);
        let mut ckpt = init_parameters(&arch, 7);
        let plan = arch.plan();
        let (off, sh) = *plan.layout().last().unwrap();
        for p in &mut ckpt.parameters[off..off + sh.param_len()] {
            *p = 0.0;
        }
        ckpt.parameters[plan.head_bias_offset()] = -40.0; // sigmoid ~ 4e-18, clamped to 1e-6
        let image = random_image(5, 8, 8);
        let mask = GtMask::zeros(8, 8);
        let (loss, grads) = forward_with_gradients(&ckpt, &image, &LossHead::PixelwiseBce(&mask))
            .unwrap();
        assert!((loss - 1.0000005e-6).abs() < 1e-9, "loss = {loss}");
        let gmax = grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(gmax < 1e-15, "gradient should vanish at saturation, got {gmax}");
    }

    /// Central finite differences (h = 1e-5, f64) over every parameter of
    /// the tiny model, for both loss heads. Relu instances that land a
    /// pre-activation within 1e-4 of the kink are re-drawn (the kink makes
    /// the difference quotient meaningless there, not the gradient wrong).
    #[test]
    fn gradients_match_finite_differences() {
        let h_step = 1e-5f64;
        let mut checked = 0usize;
        let mut worst = 0.0f64;
        for instance in 0..10u64 {
            for act in [Act::Relu, Act::Softplus] {
                let arch = tiny_arch(act);
                let (ckpt, image) = {
                    let mut attempt = instance;
                    loop {
                        let ckpt = init_hot(&arch, attempt);
                        let image = random_image(attempt + 500, 8, 8);
                        if act == Act::Softplus || kink_distance(&arch, &ckpt, &image) > 1e-4 {
                            break (ckpt, image);
                        }
                        attempt += 1000;
                    }
                };
                let mask = {
                    let mut rng = ChaCha12Rng::seed_from_u64(instance + 900);
                    let vals: Vec<u8> = (0..64).map(|_| rng.gen_range(0..2u8)).collect();
                    GtMask::new(Grid::from_vec(8, 8, vals).unwrap()).unwrap()
                };
                let soft = {
                    let mut rng = ChaCha12Rng::seed_from_u64(instance + 901);
                    ProbabilityMap::from_vec(
                        8,
                        8,
                        (0..64).map(|_| rng.gen_range(0.05..0.95)).collect(),
                    )
                    .unwrap()
                };
                for head_kind in 0..2 {
                    let head = if head_kind == 0 {
                        LossHead::PixelwiseBce(&mask)
                    } else {
                        LossHead::DistillKl(&soft)
                    };
                    let (_, grads) = forward_with_gradients(&ckpt, &image, &head).unwrap();
                    for i in (0..ckpt.parameters.len()).step_by(13) {
                        let mut hi = ckpt.clone();
                        hi.parameters[i] += h_step;
                        let mut lo = ckpt.clone();
                        lo.parameters[i] -= h_step;
                        let (lhi, _) = forward_with_gradients(&hi, &image, &head).unwrap();
                        let (llo, _) = forward_with_gradients(&lo, &image, &head).unwrap();
                        let fd = (lhi - llo) / (2.0 * h_step);
                        let denom = fd.abs().max(grads[i].abs()).max(1e-6);
                        let rel = (fd - grads[i]).abs() / denom;
                        worst = worst.max(rel);
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 1000, "checked only {checked} coordinates");
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    /// Init with a larger weight scale so activations are well away from
    /// zero on average (keeps finite differences well-conditioned).
    fn init_hot(arch: &ArchitectureSpec, seed: u64) -> ModelCheckpoint {
        let mut ckpt = init_parameters(arch, seed);
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xb1a5);
        for p in &mut ckpt.parameters {
            *p += 0.05 * (rng.gen::<f64>() - 0.5);
        }
        ckpt
    }

    /// Smallest |pre-activation| across the network (relu kink proximity).
    fn kink_distance(arch: &ArchitectureSpec, ckpt: &ModelCheckpoint, image: &Image) -> f64 {
        let plan = arch.plan();
        let input = image_tensor::<f64>(image);
        let trace = nn::net_forward(&plan, &ckpt.parameters, &input);
        trace.min_abs_preactivation()
    }
}
