use super::{CheckpointMeta, Denoiser, NoiseSchedule};
use crate::error::{DalError, Result};
use crate::image::Image;
use crate::nn::{Act, ParamStore, UNet};

/// Maximum images per network call; larger batches lose cache locality.
const CHUNK: usize = 8;

/// A trained UNet noise predictor together with its schedule.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub net: UNet,
    pub params: ParamStore<f32>,
    pub schedule: NoiseSchedule,
    pub image_size: usize,
    pub meta: CheckpointMeta,
}

impl DiffusionModel {
    pub fn predict_batch(&self, xs: &[Image], ts: &[f64]) -> Result<Vec<Image>> {
        let d = self.image_size;
        let mut out = Vec::with_capacity(xs.len());
        for (chunk, tchunk) in xs.chunks(CHUNK).zip(ts.chunks(CHUNK)) {
            let mut act = Act::<f32>::zeros(1, chunk.len(), d, d);
            for (b, x) in chunk.iter().enumerate() {
                if x.size() != d {
                    return Err(DalError::DimensionMismatch {
                        expected: d,
                        got: x.size(),
                    });
                }
                for (dst, src) in act.data[b * d * d..(b + 1) * d * d].iter_mut().zip(x.as_slice()) {
                    *dst = *src as f32;
                }
            }
            let y = self.net.predict(&self.params.data, &act, tchunk);
            for b in 0..chunk.len() {
                let data = y.data[b * d * d..(b + 1) * d * d].iter().map(|&v| v as f64).collect();
                out.push(Image::new(d, data)?);
            }
        }
        Ok(out)
    }
}

impl Denoiser for DiffusionModel {
    fn image_size(&self) -> Option<usize> {
        Some(self.image_size)
    }

    fn predict_eps(&self, xs: &[Image], t: usize) -> Result<Vec<Image>> {
        self.schedule.check_t(t)?;
        let ts = vec![t as f64; xs.len()];
        self.predict_batch(xs, &ts)
    }

    fn id(&self) -> String {
        self.meta.model_id.clone()
    }
}

impl DiffusionModel {
    /// Initialises a network from `cfg.seed`, trains it on `dataset` and
    /// returns the EMA model with its loss curve.
    pub fn train_new(
        arch: &crate::nn::ArchConfig,
        schedule: super::ScheduleParams,
        dataset: &[Image],
        cfg: &super::TrainConfig,
        dataset_hash: String,
    ) -> Result<(Self, Vec<super::LossRecord>)> {
        let d = dataset.first().ok_or(DalError::Empty("training dataset"))?.size();
        if d % arch.size_multiple() != 0 {
            return Err(DalError::invalid(format!(
                "image size {d} is not a multiple of {}",
                arch.size_multiple()
            )));
        }
        let sched = NoiseSchedule::new(schedule.clone())?;
        let mut init_rng = crate::rng::derived_rng(cfg.seed, &[crate::rng::stream::TRAIN]);
        let (net, mut params) = UNet::new::<f32>(arch, &mut init_rng)?;
        let outcome = super::train(&net, &mut params, dataset, cfg, &sched)?;
        params.data = outcome.ema;
        let meta = CheckpointMeta::new(&params, d, cfg.seed, dataset_hash, schedule, arch.clone());
        Ok((
            DiffusionModel {
                net,
                params,
                schedule: sched,
                image_size: d,
                meta,
            },
            outcome.losses,
        ))
    }
}
