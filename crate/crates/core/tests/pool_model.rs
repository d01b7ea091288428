//! Pool behaviour checked against a simple queue model.

use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use chainforge::envpool::{EnvLease, EnvPool, PoolConfig, PoolError, PoolManager};
use chainforge::envs::{CounterEnv, EnvError, EnvFactory, EnvStepResult, Environment, ResetRequest};
use proptest::prelude::*;
use tokio::task::JoinHandle;

/// Counter environment whose resets fail on a fixed schedule.
struct Flaky {
    inner: CounterEnv,
    resets: Arc<AtomicU64>,
    fail_every: u64,
}

#[async_trait]
impl Environment for Flaky {
    async fn reset(&mut self, request: &ResetRequest) -> Result<String, EnvError> {
        let n = self.resets.fetch_add(1, Ordering::Relaxed);
        if self.fail_every > 0 && n % self.fail_every == self.fail_every - 1 {
            return Err(EnvError::Backend("injected reset failure".into()));
        }
        self.inner.reset(request)
    }

    async fn step(&mut self, action: &str) -> Result<EnvStepResult, EnvError> {
        self.inner.step(action)
    }
}

fn flaky_factory(fail_every: u64) -> EnvFactory {
    let resets = Arc::new(AtomicU64::new(0));
    Arc::new(move |_| {
        Ok(Box::new(Flaky {
            inner: CounterEnv::new(),
            resets: resets.clone(),
            fail_every,
        }) as Box<dyn Environment>)
    })
}

async fn settle() {
    for _ in 0..8 {
        tokio::task::yield_now().await;
    }
}

/// Applies `ops` (true = acquire, false = release) for chains `c0..cN`
/// and checks every step against a FIFO model.
async fn run_model(capacity: usize, ops: Vec<(bool, u8)>, fail_every: u64) -> Result<(), String> {
    let pool = EnvPool::new(
        "p",
        PoolConfig::with_capacity(capacity),
        flaky_factory(fail_every),
    )
    .unwrap();
    let mut holders: BTreeMap<String, String> = BTreeMap::new();
    let mut queue: VecDeque<String> = VecDeque::new();
    let mut pending: BTreeMap<String, JoinHandle<Result<EnvLease, PoolError>>> = BTreeMap::new();

    for (acquire, c) in ops {
        let chain = format!("c{c}");
        if acquire {
            if let Some(inst) = holders.get(&chain) {
                let again = pool.acquire(&chain).await.map_err(|e| e.to_string())?;
                if &again.instance_id != inst {
                    return Err(format!("{chain}: repeat acquire moved to {}", again.instance_id));
                }
                continue;
            }
            if pending.contains_key(&chain) {
                continue;
            }
            let p = pool.clone();
            let ch = chain.clone();
            let h = tokio::spawn(async move { p.acquire(&ch).await });
            settle().await;
            if holders.len() < capacity && queue.is_empty() {
                let lease = h.await.unwrap().map_err(|e| e.to_string())?;
                holders.insert(chain, lease.instance_id);
            } else {
                if h.is_finished() {
                    return Err(format!("{chain} was served while the pool was full"));
                }
                queue.push_back(chain.clone());
                pending.insert(chain, h);
            }
        } else {
            let held = holders.remove(&chain).is_some();
            let released = pool.release(&chain).await;
            if released != held {
                return Err(format!("{chain}: release returned {released}, model says {held}"));
            }
            if held {
                if let Some(next) = queue.pop_front() {
                    let h = pending.remove(&next).unwrap();
                    let lease = tokio::time::timeout(Duration::from_secs(5), h)
                        .await
                        .map_err(|_| format!("waiter {next} was lost"))?
                        .unwrap()
                        .map_err(|e| e.to_string())?;
                    if lease.chain_id != next {
                        return Err(format!("lease for {} handed to {next}", lease.chain_id));
                    }
                    holders.insert(next, lease.instance_id);
                }
                settle().await;
                if let Some((c, _)) = pending.iter().find(|(_, h)| h.is_finished()) {
                    return Err(format!("{c} was served out of order"));
                }
            }
        }
        pool.check_invariants()?;
        let live = pool.leases();
        if live != holders {
            return Err(format!("pool leases {live:?} != model {holders:?}"));
        }
        let m = pool.metrics();
        if m.queued != queue.len() || m.leased != holders.len() || m.free + m.leased + m.resetting != capacity
        {
            return Err(format!("metrics {m:?} disagree with the model"));
        }
    }

    // Drain: releasing every holder serves every waiter, then nothing is left.
    while let Some(chain) = holders.keys().next().cloned() {
        holders.remove(&chain);
        pool.release(&chain).await;
        if let Some(next) = queue.pop_front() {
            let lease = pending
                .remove(&next)
                .unwrap()
                .await
                .unwrap()
                .map_err(|e| e.to_string())?;
            holders.insert(next, lease.instance_id);
        }
    }
    let m = pool.metrics();
    if m.leased != 0 || m.queued != 0 || m.free != capacity || !pending.is_empty() {
        return Err(format!("not drained: {m:?}"));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pool_follows_fifo_model(
        capacity in 1usize..5,
        ops in prop::collection::vec((any::<bool>(), 0u8..12), 1..200),
        fail_every in prop_oneof![Just(0u64), 2u64..6],
    ) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let out = rt.block_on(run_model(capacity, ops, fail_every));
        prop_assert!(out.is_ok(), "{}", out.unwrap_err());
    }
}

#[tokio::test]
async fn manager_releases_every_pool_of_a_chain() {
    let m = Arc::new(PoolManager::new());
    m.create_pool("a", PoolConfig::with_capacity(1), flaky_factory(0))
        .unwrap();
    m.create_pool("b", PoolConfig::with_capacity(1), flaky_factory(0))
        .unwrap();
    assert!(m
        .create_pool("a", PoolConfig::with_capacity(1), flaky_factory(0))
        .is_err());
    m.acquire("a", "x").await.unwrap();
    m.acquire("b", "x").await.unwrap();
    assert_eq!(m.total_leased(), 2);
    assert_eq!(m.release_chain("x").await, 2);
    assert_eq!(m.total_leased(), 0);
    assert!(matches!(
        m.acquire("nope", "x").await,
        Err(PoolError::UnknownPool(_))
    ));
}

#[tokio::test(start_paused = true)]
async fn reaper_reclaims_abandoned_leases() {
    let m = Arc::new(PoolManager::new());
    let cfg = PoolConfig {
        lease_timeout: Duration::from_secs(10),
        ..PoolConfig::with_capacity(1)
    };
    m.create_pool("a", cfg, flaky_factory(0)).unwrap();
    let stale = m.acquire("a", "abandoned").await.unwrap();
    let reaper = m.spawn_reaper(Duration::from_secs(1));
    let fresh = m.acquire("a", "next").await.unwrap();
    assert_eq!(fresh.instance_id, stale.instance_id);
    assert!(!stale.is_current());
    assert!(matches!(stale.lock().await, Err(PoolError::StaleLease(_))));
    reaper.abort();
}
