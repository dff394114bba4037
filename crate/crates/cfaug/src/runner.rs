//! Thread-pool implementations of the core gradient and synthesis traits.
//!
//! Both split work into the same fixed chunks as the sequential versions
//! and combine results in chunk order, so output does not depend on the
//! number of workers.

use cfaug_core::autograd::Grads;
use cfaug_core::model::{DisAeModel, LossBreakdown, LossWeights, ModelError};
use cfaug_core::reproduce::{synthesize, ParentPair, SynthesisCandidate, Synthesizer, SYNTH_BATCH};
use cfaug_core::train::{chunk_gradients, reduce_chunks, GradientRunner, Sample, GRAD_CHUNK};
use rayon::prelude::*;

pub struct RayonRunner {
    pool: rayon::ThreadPool,
}

impl RayonRunner {
    pub fn new(workers: usize) -> Self {
        Self { pool: pool(workers) }
    }
}

fn pool(workers: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
}

impl GradientRunner for RayonRunner {
    fn batch_gradients(
        &self,
        model: &DisAeModel,
        batch: &[&Sample],
        w: LossWeights,
    ) -> Result<(Grads, LossBreakdown), ModelError> {
        let scale = 1.0 / batch.len() as f64;
        let parts = self.pool.install(|| {
            batch
                .par_chunks(GRAD_CHUNK)
                .map(|c| chunk_gradients(model, c, w, scale))
                .collect::<Result<Vec<_>, _>>()
        })?;
        Ok(reduce_chunks(model, parts))
    }
}

pub struct RayonSynthesizer {
    pool: rayon::ThreadPool,
}

impl RayonSynthesizer {
    pub fn new(workers: usize) -> Self {
        Self { pool: pool(workers) }
    }
}

impl Synthesizer for RayonSynthesizer {
    fn synthesize_batch(
        &self,
        model: &DisAeModel,
        pairs: &[ParentPair],
    ) -> Vec<Result<SynthesisCandidate, ModelError>> {
        self.pool.install(|| {
            pairs
                .par_chunks(SYNTH_BATCH)
                .flat_map_iter(|c| c.iter().map(|p| synthesize(model, p)))
                .collect()
        })
    }
}
