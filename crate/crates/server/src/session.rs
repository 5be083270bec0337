//! Streaming sessions: one step in, one budgeted token sequence out.

use std::sync::Arc;
use std::time::Instant;

use navtoken_core::cache::CacheStore;
use navtoken_core::organizer::{assemble_navigation, count_tokens, FeatureBank};
use navtoken_core::sim::{bats_step, step_seed};
use navtoken_core::tvi::TviParams;
use navtoken_core::wire::{FeatureSourceKind, SessionRequest, StepRequest, StepResponse};
use navtoken_core::{CameraRig, SamplingCurve};

use crate::error::ApiError;
use crate::features::Loader;

pub struct Session {
    rig: CameraRig,
    budget: u64,
    epsilon: f64,
    seed: u64,
    features: FeatureSourceKind,
    tvi: TviParams,
    bank: FeatureBank,
    last_t: u32,
    cache: Option<Arc<CacheStore>>,
}

impl Session {
    pub fn new(req: SessionRequest, cache: Option<Arc<CacheStore>>) -> Result<Self, ApiError> {
        let rig = CameraRig::new(req.rig)?;
        // Rejects budgets that cannot hold the latest frame before any step arrives.
        navtoken_core::bats::budget_cap(req.budget, rig.len() as u32)?;
        if !(req.epsilon > 0.0 && req.epsilon < 1.0) {
            return Err(ApiError::invalid(format!("epsilon {} outside (0, 1)", req.epsilon)));
        }
        let tvi = TviParams::init(req.tvi.embed_dim, req.tvi.pe_dim, req.tvi.seed)?;
        Ok(Self {
            rig,
            budget: req.budget,
            epsilon: req.epsilon,
            seed: req.seed,
            features: req.features,
            tvi,
            bank: FeatureBank::new(),
            last_t: 0,
            cache,
        })
    }

    pub fn step(&mut self, step: StepRequest) -> Result<StepResponse, ApiError> {
        if step.t != self.last_t + 1 {
            return Err(ApiError::invalid(format!("expected step t={}, got t={}", self.last_t + 1, step.t)));
        }
        let n = self.rig.len();
        let mut frames = step.frames;
        frames.sort_by_key(|f| f.cam);
        if frames.iter().map(|f| f.cam).ne(0..n) {
            return Err(ApiError::invalid(format!("step t={} must carry one frame for each of {n} cameras", step.t)));
        }

        let loader = Loader {
            kind: self.features,
            seed: self.seed,
            channels: self.tvi.embed_dim,
            cache: self.cache.as_deref(),
        };
        let mut incoming = FeatureBank::new();
        for f in &frames {
            loader.load(&mut incoming, step.t, f.cam, &f.data_ref, true)?;
        }
        self.bank.drop_fine(self.last_t);
        self.bank.merge(incoming);
        self.last_t = step.t;

        let curve = SamplingCurve::solve(step.t, n as u32, self.budget, self.epsilon)?;
        let planned = bats_step(&curve, step_seed(self.seed, step.t), true)?;
        let text = vec![vec![0.0f32; self.tvi.embed_dim]; step.text_len];
        let start = Instant::now();
        let seq = assemble_navigation(&planned.plan, &self.rig, &self.bank, &text, &self.tvi)?;
        let assemble_us = start.elapsed().as_secs_f64() * 1e6;
        Ok(StepResponse {
            visual_tokens: seq.visual_region_count() as u64,
            total_tokens: seq.total_count() as u64,
            counts: count_tokens(&seq),
            plan: planned.plan,
            regime: planned.regime,
            assemble_us,
        })
    }
}
