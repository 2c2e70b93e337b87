//! Dynamic regions: per-connection slots that hold one loaded pipeline.

pub mod exec;
pub mod params;
mod registry;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

pub use exec::{check_range, execute, rcpu_execute, ExecConfig, ExecContext, ExecError, ExecStats, ResponseSink};
pub use params::{decode_request, encode_request, ParamError, Query, QueryKind, Request};
pub use registry::{Lanes, PipelineRegistry, PipelineSpec, Stage};

use crate::wire::{QueuePairId, Status};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StackError {
    #[error("all {0} regions are bound")]
    Exhausted(usize),
    #[error("unknown pipeline {0}")]
    UnknownPipeline(u16),
    #[error("region {0} is busy")]
    Busy(usize),
    #[error("region {region} is not bound to {qpair}")]
    NotBound { region: usize, qpair: QueuePairId },
    #[error("no pipeline loaded in region {0}")]
    NotLoaded(usize),
    #[error("region {region} has pipeline {loaded} loaded, request is for {requested}")]
    WrongPipeline { region: usize, loaded: u16, requested: u16 },
}

impl StackError {
    pub fn status(&self) -> Status {
        match self {
            StackError::Exhausted(_) => Status::ResourceExhausted,
            StackError::UnknownPipeline(_) => Status::NotFound,
            StackError::Busy(_) => Status::Busy,
            StackError::NotBound { .. } => Status::PermissionDenied,
            StackError::NotLoaded(_) | StackError::WrongPipeline { .. } => Status::RequestError,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionInfo {
    pub region_id: usize,
    pub bound_qpair: Option<QueuePairId>,
    pub loaded: Option<u16>,
    pub busy: bool,
}

#[derive(Debug, Default)]
struct Slot {
    bound: Option<QueuePairId>,
    loaded: Option<u16>,
    busy: bool,
    abort: Option<Arc<AtomicBool>>,
}

/// The fixed set of dynamic regions and the pipeline registry.
pub struct OperatorStack {
    slots: Mutex<Vec<Slot>>,
    registry: PipelineRegistry,
    reconfig_delay: Duration,
}

/// Marks a region busy for the lifetime of one request.
pub struct RequestGuard<'a> {
    stack: &'a OperatorStack,
    region: usize,
    abort: Arc<AtomicBool>,
}

impl RequestGuard<'_> {
    pub fn region(&self) -> usize {
        self.region
    }

    pub fn aborted(&self) -> bool {
        self.abort.load(Ordering::Relaxed)
    }
}

impl Drop for RequestGuard<'_> {
    fn drop(&mut self) {
        self.stack.slots.lock().unwrap()[self.region].busy = false;
    }
}

impl OperatorStack {
    pub fn new(regions: usize, registry: PipelineRegistry, reconfig_delay: Duration) -> Self {
        assert!(regions >= 1);
        OperatorStack {
            slots: Mutex::new((0..regions).map(|_| Slot::default()).collect()),
            registry,
            reconfig_delay,
        }
    }

    pub fn registry(&self) -> &PipelineRegistry {
        &self.registry
    }

    pub fn regions(&self) -> usize {
        self.slots.lock().unwrap().len()
    }

    /// Binds the lowest free region. `abort` is raised if the region is
    /// released while a request runs.
    pub fn bind_region(&self, qpair: QueuePairId, abort: Arc<AtomicBool>) -> Result<usize, StackError> {
        let mut slots = self.slots.lock().unwrap();
        let n = slots.len();
        let (i, slot) = slots
            .iter_mut()
            .enumerate()
            .find(|(_, s)| s.bound.is_none() && !s.busy)
            .ok_or(StackError::Exhausted(n))?;
        slot.bound = Some(qpair);
        slot.loaded = None;
        slot.abort = Some(abort);
        Ok(i)
    }

    pub fn region_of(&self, qpair: QueuePairId) -> Option<usize> {
        self.slots.lock().unwrap().iter().position(|s| s.bound == Some(qpair))
    }

    pub fn load_pipeline(&self, region: usize, qpair: QueuePairId, pipeline: u16) -> Result<(), StackError> {
        if self.registry.get(pipeline).is_none() {
            return Err(StackError::UnknownPipeline(pipeline));
        }
        {
            let mut slots = self.slots.lock().unwrap();
            let s = &mut slots[region];
            if s.bound != Some(qpair) {
                return Err(StackError::NotBound { region, qpair });
            }
            if s.busy {
                return Err(StackError::Busy(region));
            }
            s.busy = true;
        }
        if !self.reconfig_delay.is_zero() {
            std::thread::sleep(self.reconfig_delay);
        }
        let mut slots = self.slots.lock().unwrap();
        let s = &mut slots[region];
        s.busy = false;
        if s.bound == Some(qpair) {
            s.loaded = Some(pipeline);
        }
        Ok(())
    }

    /// Admits one request on an idle, loaded region.
    pub fn begin_request(&self, region: usize, qpair: QueuePairId, pipeline: u16) -> Result<(RequestGuard<'_>, &PipelineSpec), StackError> {
        let mut slots = self.slots.lock().unwrap();
        let s = &mut slots[region];
        if s.bound != Some(qpair) {
            return Err(StackError::NotBound { region, qpair });
        }
        if s.busy {
            return Err(StackError::Busy(region));
        }
        let loaded = s.loaded.ok_or(StackError::NotLoaded(region))?;
        if loaded != pipeline {
            return Err(StackError::WrongPipeline {
                region,
                loaded,
                requested: pipeline,
            });
        }
        s.busy = true;
        let abort = s.abort.clone().unwrap_or_default();
        let spec = self.registry.get(loaded).expect("loaded pipelines are registered");
        Ok((
            RequestGuard {
                stack: self,
                region,
                abort,
            },
            spec,
        ))
    }

    /// Unbinds the region of `qpair`, aborting any request in flight.
    pub fn release_region(&self, qpair: QueuePairId) {
        let mut slots = self.slots.lock().unwrap();
        if let Some(s) = slots.iter_mut().find(|s| s.bound == Some(qpair)) {
            if let Some(a) = s.abort.take() {
                if s.busy {
                    a.store(true, Ordering::Relaxed);
                }
            }
            s.bound = None;
            s.loaded = None;
        }
    }

    pub fn bound_regions(&self) -> usize {
        self.slots.lock().unwrap().iter().filter(|s| s.bound.is_some()).count()
    }

    pub fn info(&self) -> Vec<RegionInfo> {
        self.slots
            .lock()
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, s)| RegionInfo {
                region_id: i,
                bound_qpair: s.bound,
                loaded: s.loaded,
                busy: s.busy,
            })
            .collect()
    }
}
