use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{image_scores, total_loss, Model};
use crate::error::{Error, Result};
use crate::imgproc::{resize_plane, Image};
use crate::tensor::optim::OptimState;
use crate::tensor::{Scalar, Tape, Tensor};

/// Training input: an image and its image-level label (`true` = manipulated).
#[derive(Clone, Debug)]
pub struct Example {
    pub image: Image,
    pub label: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Random-rescale range; `None` disables augmentation.
    pub rescale: Option<(f64, f64)>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 8,
            rescale: Some((0.75, 1.25)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    /// Accuracy of the pre-update predictions at threshold 0.5.
    pub accuracy: f64,
}

fn resize_rgb(img: &Image, w: usize, h: usize) -> Result<Vec<Vec<f32>>> {
    let rgb = img.to_rgb();
    rgb.planes()
        .iter()
        .map(|p| resize_plane(p, rgb.width(), rgb.height(), w, h))
        .collect()
}

/// Rescales by a factor drawn from `range`, then crops (when larger) or
/// edge-pads (when smaller) back to `size × size` at a random offset.
pub fn augment_rescale(img: &Image, size: usize, range: (f64, f64), rng: &mut impl Rng) -> Result<Image> {
    let s = rng.random_range(range.0..=range.1);
    let n = ((size as f64 * s).round() as usize).max(1);
    let planes = resize_rgb(img, n, n)?;
    let offset = rng.random_range(0..=n.abs_diff(size));
    let out: Vec<Vec<f32>> = planes
        .iter()
        .map(|p| {
            let mut o = vec![0.0f32; size * size];
            for y in 0..size {
                for x in 0..size {
                    let (sy, sx) = if n >= size {
                        (y + offset, x + offset)
                    } else {
                        (
                            (y as isize - offset as isize).clamp(0, n as isize - 1) as usize,
                            (x as isize - offset as isize).clamp(0, n as isize - 1) as usize,
                        )
                    };
                    o[y * size + x] = p[sy * n + sx];
                }
            }
            o
        })
        .collect();
    Image::from_planes(size, size, &out)
}

/// `[N,3,size,size]` network input in `[-0.5, 0.5]`, resizing as needed.
pub fn batch_tensor<T: Scalar>(images: &[&Image], size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        let planes = if img.width() == size && img.height() == size {
            img.to_rgb().planes()
        } else {
            resize_rgb(img, size, size)?
        };
        for p in planes {
            data.extend(p.into_iter().map(|v| T::lit(v as f64 / 255.0 - 0.5)));
        }
    }
    Tensor::new(vec![images.len(), 3, size, size], data)
}

/// Per-epoch learning-rate rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to 10% of it over the run.
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = epoch as f64 / epochs.max(1) as f64;
                base * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
            }
        }
    }
}

/// Fraction of `data` whose fused image score lands on the right side of 0.5.
pub fn accuracy<T: Scalar>(model: &Model<T>, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("no examples to score".into()));
    }
    let size = model.config.input_size;
    let mut correct = 0;
    for chunk in data.chunks(16) {
        let refs: Vec<&Image> = chunk.iter().map(|e| &e.image).collect();
        let scores = model.predict(batch_tensor(&refs, size)?)?;
        correct += scores.iter().zip(chunk).filter(|(s, e)| (**s >= 0.5) == e.label).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// One pass over `data` in a seed-determined order.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    data: &[Example],
    opt: &mut OptimState<T>,
    seed: u64,
    opts: &TrainOptions,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let size = model.config.input_size;
    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for chunk in order.chunks(opts.batch_size) {
        let images = chunk
            .iter()
            .map(|&i| match opts.rescale {
                Some(r) => augment_rescale(&data[i].image, size, r, &mut rng),
                None => Ok(data[i].image.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = images.iter().collect();
        let labels: Vec<T> = chunk.iter().map(|&i| if data[i].label { T::one() } else { T::zero() }).collect();

        let mut tape = Tape::new();
        let x = tape.constant(batch_tensor(&refs, size)?);
        let out = model.forward(&mut tape, x, None)?;
        let scores = image_scores(tape.value(out.conv_logits), tape.value(out.trans_logits));
        correct += scores
            .iter()
            .zip(chunk)
            .filter(|(s, &i)| (**s >= 0.5) == data[i].label)
            .count();
        let loss = total_loss(&mut tape, out.conv_logits, out.trans_logits, &labels)?;
        loss_sum += tape.value(loss).item().as_f64() * chunk.len() as f64;
        tape.backward(loss)?;
        let grads = model.params.grads(&tape);
        opt.step(&mut model.params, &grads)?;
    }
    Ok(EpochStats {
        mean_loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}
