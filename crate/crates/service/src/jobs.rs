//! Job records and the background runner.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use cams_core::imaging::encode_png;
use cams_core::transfer::{run_classic_nst, run_transfer, LossRecord, TransferConfig, TransferState};
use cams_core::{CamsError, FeatureExtractor, Image};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Progress {
    pub iter: usize,
    pub total_iters: usize,
    pub losses: Option<LossRecord>,
}

#[derive(Debug)]
pub struct JobRecord {
    pub id: String,
    pub status: JobStatus,
    pub error: Option<String>,
    pub config: TransferConfig,
    pub baseline: bool,
    pub content_ref: String,
    pub style_ref: String,
    pub progress: Progress,
    pub loss_history: Vec<LossRecord>,
    pub snapshots: BTreeMap<usize, Arc<Vec<u8>>>,
    pub final_png: Option<Arc<Vec<u8>>>,
    pub palettes: Option<serde_json::Value>,
    pub wall_time_s: Option<f64>,
}

/// Serializable view of a job, copied out under the lock.
#[derive(Debug, Clone, Serialize)]
pub struct JobView {
    pub id: String,
    pub status: JobStatus,
    pub error: Option<String>,
    pub config: TransferConfig,
    pub baseline: bool,
    pub content: String,
    pub style: String,
    pub progress: Progress,
    pub loss_history: Vec<LossRecord>,
    pub snapshots: Vec<usize>,
    pub has_final: bool,
    pub palettes: Option<serde_json::Value>,
    pub wall_time_s: Option<f64>,
}

impl JobRecord {
    pub fn view(&self) -> JobView {
        JobView {
            id: self.id.clone(),
            status: self.status,
            error: self.error.clone(),
            config: self.config.clone(),
            baseline: self.baseline,
            content: self.content_ref.clone(),
            style: self.style_ref.clone(),
            progress: self.progress.clone(),
            loss_history: self.loss_history.clone(),
            snapshots: self.snapshots.keys().copied().collect(),
            has_final: self.final_png.is_some(),
            palettes: self.palettes.clone(),
            wall_time_s: self.wall_time_s,
        }
    }
}

pub struct JobHandle {
    pub record: Mutex<JobRecord>,
    pub cancel: AtomicBool,
}

impl JobHandle {
    pub fn view(&self) -> JobView {
        self.record.lock().expect("job lock").view()
    }
}

pub struct JobSpec {
    pub content: Arc<Image>,
    pub style: Arc<Image>,
    pub config: TransferConfig,
    pub baseline: bool,
}

/// Waits for a worker slot, then runs the job on a blocking thread.
pub async fn run_job(
    handle: Arc<JobHandle>,
    spec: JobSpec,
    backbone: Arc<FeatureExtractor>,
    workers: Arc<Semaphore>,
    data_dir: Option<PathBuf>,
) {
    let _permit = workers.acquire_owned().await.expect("worker semaphore open");
    let h = handle.clone();
    let joined = tokio::task::spawn_blocking(move || execute(&h, spec, &backbone, data_dir.as_deref())).await;
    if let Err(e) = joined {
        finish_failed(&handle, format!("worker panicked: {e}"));
    }
}

fn finish_failed(handle: &JobHandle, reason: String) {
    let mut rec = handle.record.lock().expect("job lock");
    rec.status = JobStatus::Failed;
    rec.error = Some(reason);
}

fn execute(handle: &JobHandle, spec: JobSpec, backbone: &FeatureExtractor, data_dir: Option<&std::path::Path>) {
    if handle.cancel.load(Ordering::SeqCst) {
        finish_failed(handle, "cancelled".into());
        return;
    }
    {
        let mut rec = handle.record.lock().expect("job lock");
        rec.status = JobStatus::Running;
    }
    let mut on_progress = |st: &TransferState<'_>| {
        let png = st.is_snapshot.then(|| Arc::new(encode_png(st.generated)));
        let mut rec = handle.record.lock().expect("job lock");
        rec.progress = Progress {
            iter: st.iter,
            total_iters: st.total_iters,
            losses: Some(st.losses),
        };
        if rec.loss_history.last().is_none_or(|l| l.iter < st.losses.iter) {
            rec.loss_history.push(st.losses);
        }
        if let Some(png) = png {
            rec.snapshots.insert(st.iter, png);
        }
        drop(rec);
        if handle.cancel.load(Ordering::SeqCst) {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    };
    let result = if spec.baseline {
        run_classic_nst(
            &spec.content,
            &spec.style,
            backbone,
            &spec.config,
            Some(&mut on_progress),
        )
    } else {
        run_transfer(
            &spec.content,
            &spec.style,
            backbone,
            &spec.config,
            Some(&mut on_progress),
        )
    };
    match result {
        Ok(r) => {
            let png = Arc::new(encode_png(&r.image));
            let id = handle.record.lock().expect("job lock").id.clone();
            if let Some(dir) = data_dir {
                let out = dir.join(format!("{id}.png"));
                if let Err(e) = r.export(&out, None) {
                    tracing::warn!(job = %id, error = %e, "could not spill job artifacts");
                }
            }
            let mut rec = handle.record.lock().expect("job lock");
            rec.loss_history = r.loss_history.clone();
            rec.palettes = Some(r.palettes_json());
            rec.final_png = Some(png);
            rec.wall_time_s = Some(r.wall_time_s);
            rec.status = JobStatus::Done;
        }
        Err(CamsError::Cancelled) => finish_failed(handle, "cancelled".into()),
        Err(e) => finish_failed(handle, e.to_string()),
    }
}
