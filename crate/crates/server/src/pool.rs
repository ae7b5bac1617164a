//! Background summary workers. Summaries never block the agent: jobs are
//! queued at append time and delivered whenever the strategy returns.

use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use agentstepper_core::summarizer::{Summarizer, SummaryOutput, SummaryRequest};
use crossbeam_channel::{unbounded, Sender};

#[derive(Clone, Debug)]
pub struct SummaryJob {
    pub run_id: String,
    pub event_id: u64,
    pub request: SummaryRequest,
}

pub type Deliver = Arc<dyn Fn(SummaryJob, SummaryOutput) + Send + Sync>;

#[derive(Default)]
struct Pending {
    count: Mutex<usize>,
    idle: Condvar,
}

pub struct SummaryPool {
    jobs: Sender<SummaryJob>,
    pending: Arc<Pending>,
}

impl SummaryPool {
    /// Workers stop once the pool is dropped and the queue drains.
    pub fn start(workers: usize, summarizer: Summarizer, deliver: Deliver) -> SummaryPool {
        let (jobs, queue) = unbounded::<SummaryJob>();
        let pending = Arc::new(Pending::default());
        for index in 0..workers.max(1) {
            let queue = queue.clone();
            let summarizer = summarizer.clone();
            let deliver = deliver.clone();
            let pending = pending.clone();
            thread::Builder::new()
                .name(format!("summary-{index}"))
                .spawn(move || {
                    for job in queue {
                        let output = summarizer.summarize(&job.request);
                        deliver(job, output);
                        let mut count = pending.count.lock().unwrap();
                        *count -= 1;
                        if *count == 0 {
                            pending.idle.notify_all();
                        }
                    }
                })
                .expect("spawn summary worker");
        }
        SummaryPool { jobs, pending }
    }

    pub fn submit(&self, job: SummaryJob) {
        *self.pending.count.lock().unwrap() += 1;
        if self.jobs.send(job).is_err() {
            *self.pending.count.lock().unwrap() -= 1;
        }
    }

    /// Waits until every submitted job was delivered. Returns false on timeout.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut count = self.pending.count.lock().unwrap();
        while *count > 0 {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            count = self.pending.idle.wait_timeout(count, deadline - now).unwrap().0;
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use agentstepper_core::summarizer::SummaryKind;

    #[test]
    fn delivers_every_job() {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let sink = seen.clone();
        let pool = SummaryPool::start(
            3,
            Summarizer::default(),
            Arc::new(move |job, output| sink.lock().unwrap().push((job.event_id, output.text))),
        );
        for event_id in 0..20 {
            let request = SummaryRequest {
                kind: SummaryKind::LlmQuery,
                current: format!("p{event_id}"),
                previous: None,
                tool: None,
            };
            pool.submit(SummaryJob { run_id: "r".into(), event_id, request });
        }
        assert!(pool.wait_idle(Duration::from_secs(5)));
        let mut seen = seen.lock().unwrap().clone();
        seen.sort();
        assert_eq!(seen.len(), 20);
        assert_eq!(seen[3], (3, "Sends prompt: p3".to_string()));
    }
}
