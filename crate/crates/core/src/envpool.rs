//! Centralized environment pools.
//!
//! A pool owns a fixed number of environment instances. A chain acquires an
//! instance by chain ID and keeps it until it releases (or the lease
//! expires); a repeated acquire by the same chain returns the same lease.
//! When every instance is leased, acquires queue FIFO. Release resets the
//! instance outside the pool lock and then hands it to the head waiter. An
//! instance whose reset fails is quarantined and replaced from the factory,
//! so capacity never shrinks.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex, MutexGuard, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::{oneshot, OwnedMutexGuard};
use tokio::time::Instant;

use crate::envs::{EnvError, EnvFactory, Environment, ResetRequest};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PoolError {
    #[error("unknown pool {0:?}")]
    UnknownPool(String),
    #[error("pool {0:?} already exists")]
    DuplicatePool(String),
    #[error("pool {pool:?}: chain {chain_id:?} waited {waited:?} without an instance")]
    Timeout {
        pool: String,
        chain_id: String,
        waited: Duration,
    },
    #[error("lease for chain {0:?} is no longer valid")]
    StaleLease(String),
    #[error("pool configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub capacity: usize,
    #[serde(with = "secs")]
    pub lease_timeout: Duration,
    #[serde(with = "secs")]
    pub acquire_timeout: Duration,
    #[serde(with = "secs")]
    pub reset_timeout: Duration,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self {
            capacity: 8,
            lease_timeout: Duration::from_secs(600),
            acquire_timeout: Duration::from_secs(300),
            reset_timeout: Duration::from_secs(30),
        }
    }
}

impl PoolConfig {
    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceState {
    Free,
    Leased,
    Resetting,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolMetrics {
    pub pool: String,
    pub free: usize,
    pub leased: usize,
    pub resetting: usize,
    pub queued: usize,
    pub total_acquires: u64,
    pub total_timeouts: u64,
    pub quarantined: u64,
    pub release_warnings: u64,
}

/// The backend held by one pool slot, plus whether the current lease has
/// started its episode yet.
pub struct SlotEnv {
    pub env: Box<dyn Environment>,
    pub episode_started: bool,
}

type SharedEnv = Arc<tokio::sync::Mutex<SlotEnv>>;

struct Slot {
    id: String,
    state: InstanceState,
    holder: Option<(String, Instant)>,
    serial: u64,
    generation: u32,
    env: SharedEnv,
}

struct Waiter {
    chain_id: String,
    ticket: u64,
    tx: oneshot::Sender<EnvLease>,
}

struct PoolState {
    slots: Vec<Slot>,
    free: VecDeque<usize>,
    leases: HashMap<String, usize>,
    waiters: VecDeque<Waiter>,
    next_ticket: u64,
    next_serial: u64,
    total_acquires: u64,
    total_timeouts: u64,
    quarantined: u64,
    release_warnings: u64,
}

struct PoolShared {
    name: String,
    config: PoolConfig,
    factory: EnvFactory,
    state: Mutex<PoolState>,
}

/// A chain's binding to one instance. Cloning a lease does not create a new
/// binding; two leases are equal when they name the same binding.
#[derive(Clone)]
pub struct EnvLease {
    pub pool: String,
    pub chain_id: String,
    pub instance_id: String,
    pub acquired_at: Instant,
    slot: usize,
    serial: u64,
    env: SharedEnv,
    shared: Arc<PoolShared>,
}

impl PartialEq for EnvLease {
    fn eq(&self, other: &Self) -> bool {
        self.pool == other.pool
            && self.chain_id == other.chain_id
            && self.instance_id == other.instance_id
            && self.slot == other.slot
            && self.serial == other.serial
    }
}

impl fmt::Debug for EnvLease {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnvLease")
            .field("pool", &self.pool)
            .field("chain_id", &self.chain_id)
            .field("instance_id", &self.instance_id)
            .field("serial", &self.serial)
            .finish()
    }
}

impl EnvLease {
    pub fn is_current(&self) -> bool {
        let st = self.shared.lock();
        st.slots[self.slot].serial == self.serial && st.slots[self.slot].state == InstanceState::Leased
    }

    /// Exclusive access to the leased instance. Fails if the lease was
    /// released or expired in the meantime.
    pub async fn lock(&self) -> Result<OwnedMutexGuard<SlotEnv>, PoolError> {
        let guard = self.env.clone().lock_owned().await;
        if !self.is_current() {
            return Err(PoolError::StaleLease(self.chain_id.clone()));
        }
        Ok(guard)
    }

    /// Locks the instance and, on first use under this lease, starts the
    /// episode described by `init`.
    pub async fn lock_started(
        &self,
        init: Option<&ResetRequest>,
    ) -> Result<OwnedMutexGuard<SlotEnv>, PoolError> {
        let mut guard = self.lock().await?;
        if !guard.episode_started {
            let default = ResetRequest::default();
            guard.env.reset(init.unwrap_or(&default)).await?;
            guard.episode_started = true;
        }
        Ok(guard)
    }
}

impl PoolShared {
    fn lock(&self) -> MutexGuard<'_, PoolState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl PoolState {
    fn make_lease(&mut self, shared: &Arc<PoolShared>, idx: usize, chain_id: &str) -> EnvLease {
        let now = Instant::now();
        self.next_serial += 1;
        let slot = &mut self.slots[idx];
        slot.state = InstanceState::Leased;
        slot.holder = Some((chain_id.to_string(), now));
        slot.serial = self.next_serial;
        self.leases.insert(chain_id.to_string(), idx);
        self.total_acquires += 1;
        EnvLease {
            pool: shared.name.clone(),
            chain_id: chain_id.to_string(),
            instance_id: slot.id.clone(),
            acquired_at: now,
            slot: idx,
            serial: slot.serial,
            env: slot.env.clone(),
            shared: shared.clone(),
        }
    }

    fn existing_lease(&self, shared: &Arc<PoolShared>, chain_id: &str) -> Option<EnvLease> {
        let idx = *self.leases.get(chain_id)?;
        let slot = &self.slots[idx];
        Some(EnvLease {
            pool: shared.name.clone(),
            chain_id: chain_id.to_string(),
            instance_id: slot.id.clone(),
            acquired_at: slot.holder.as_ref().map(|h| h.1).unwrap_or_else(Instant::now),
            slot: idx,
            serial: slot.serial,
            env: slot.env.clone(),
            shared: shared.clone(),
        })
    }

    /// Gives a free slot to the head waiter, or returns it to the free list.
    fn hand_out(&mut self, shared: &Arc<PoolShared>, idx: usize) {
        while let Some(w) = self.waiters.pop_front() {
            if w.tx.is_closed() {
                continue;
            }
            if let Some(lease) = self.existing_lease(shared, &w.chain_id) {
                let _ = w.tx.send(lease);
                continue;
            }
            let lease = self.make_lease(shared, idx, &w.chain_id);
            match w.tx.send(lease) {
                Ok(()) => return,
                Err(_) => self.unlease(idx, &w.chain_id),
            }
        }
        self.slots[idx].state = InstanceState::Free;
        self.free.push_back(idx);
    }

    fn unlease(&mut self, idx: usize, chain_id: &str) {
        self.leases.remove(chain_id);
        self.total_acquires -= 1;
        let slot = &mut self.slots[idx];
        slot.holder = None;
        self.next_serial += 1;
        slot.serial = self.next_serial;
    }
}

/// A fixed-capacity pool of one environment kind.
#[derive(Clone)]
pub struct EnvPool {
    shared: Arc<PoolShared>,
}

impl fmt::Debug for EnvPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnvPool")
            .field("name", &self.shared.name)
            .field("config", &self.shared.config)
            .finish()
    }
}

impl EnvPool {
    pub fn new(name: impl Into<String>, config: PoolConfig, factory: EnvFactory) -> Result<Self, PoolError> {
        let name = name.into();
        if config.capacity == 0 {
            return Err(PoolError::Config(format!("pool {name:?}: capacity must be >= 1")));
        }
        let mut slots = Vec::with_capacity(config.capacity);
        for i in 0..config.capacity {
            let env = factory(i)?;
            slots.push(Slot {
                id: format!("{name}-{i}"),
                state: InstanceState::Free,
                holder: None,
                serial: 0,
                generation: 0,
                env: Arc::new(tokio::sync::Mutex::new(SlotEnv {
                    env,
                    episode_started: false,
                })),
            });
        }
        let state = PoolState {
            free: (0..slots.len()).collect(),
            slots,
            leases: HashMap::new(),
            waiters: VecDeque::new(),
            next_ticket: 0,
            next_serial: 0,
            total_acquires: 0,
            total_timeouts: 0,
            quarantined: 0,
            release_warnings: 0,
        };
        Ok(Self {
            shared: Arc::new(PoolShared {
                name,
                config,
                factory,
                state: Mutex::new(state),
            }),
        })
    }

    pub fn name(&self) -> &str {
        &self.shared.name
    }

    pub fn config(&self) -> &PoolConfig {
        &self.shared.config
    }

    pub fn capacity(&self) -> usize {
        self.shared.config.capacity
    }

    pub async fn acquire(&self, chain_id: &str) -> Result<EnvLease, PoolError> {
        self.acquire_timeout(chain_id, self.shared.config.acquire_timeout)
            .await
    }

    pub async fn acquire_timeout(&self, chain_id: &str, timeout: Duration) -> Result<EnvLease, PoolError> {
        let shared = &self.shared;
        let (ticket, mut rx) = {
            let mut st = shared.lock();
            if let Some(lease) = st.existing_lease(shared, chain_id) {
                return Ok(lease);
            }
            if let Some(idx) = st.free.pop_front() {
                return Ok(st.make_lease(shared, idx, chain_id));
            }
            let (tx, rx) = oneshot::channel();
            st.next_ticket += 1;
            let ticket = st.next_ticket;
            st.waiters.push_back(Waiter {
                chain_id: chain_id.to_string(),
                ticket,
                tx,
            });
            (ticket, rx)
        };
        tracing::debug!(pool = %shared.name, chain_id, ticket, "acquire queued");
        match tokio::time::timeout(timeout, &mut rx).await {
            Ok(Ok(lease)) => Ok(lease),
            Ok(Err(_)) => Err(PoolError::Config(format!(
                "pool {:?} dropped a waiter",
                shared.name
            ))),
            Err(_) => {
                let mut st = shared.lock();
                if let Some(pos) = st.waiters.iter().position(|w| w.ticket == ticket) {
                    st.waiters.remove(pos);
                    st.total_timeouts += 1;
                    return Err(PoolError::Timeout {
                        pool: shared.name.clone(),
                        chain_id: chain_id.to_string(),
                        waited: timeout,
                    });
                }
                // Served between the timer firing and taking the lock.
                drop(st);
                rx.try_recv().map_err(|_| PoolError::Timeout {
                    pool: shared.name.clone(),
                    chain_id: chain_id.to_string(),
                    waited: timeout,
                })
            }
        }
    }

    /// Releases the chain's lease, resets the instance and serves the next
    /// waiter. Returns false (and counts a warning) if the chain held no
    /// lease.
    pub async fn release(&self, chain_id: &str) -> bool {
        let shared = &self.shared;
        let (idx, env) = {
            let mut st = shared.lock();
            let Some(idx) = st.leases.remove(chain_id) else {
                st.release_warnings += 1;
                tracing::warn!(pool = %shared.name, chain_id, "release without a lease");
                return false;
            };
            st.next_serial += 1;
            let serial = st.next_serial;
            let slot = &mut st.slots[idx];
            slot.state = InstanceState::Resetting;
            slot.holder = None;
            slot.serial = serial;
            (idx, slot.env.clone())
        };
        let outcome = tokio::time::timeout(shared.config.reset_timeout, async {
            let mut guard = env.lock().await;
            guard.episode_started = false;
            guard.env.reset(&ResetRequest::default()).await
        })
        .await;
        let failure = match outcome {
            Ok(Ok(_)) => None,
            Ok(Err(e)) => Some(e.to_string()),
            Err(_) => Some(format!("reset timed out after {:?}", shared.config.reset_timeout)),
        };
        let replacement = match failure {
            None => None,
            Some(reason) => {
                tracing::warn!(pool = %shared.name, slot = idx, %reason, "quarantining instance");
                Some(self.replacement(idx))
            }
        };
        let mut st = shared.lock();
        if let Some(replacement) = replacement {
            st.quarantined += 1;
            if let Some(env) = replacement {
                let slot = &mut st.slots[idx];
                slot.generation += 1;
                slot.id = format!("{}-{}.{}", shared.name, idx, slot.generation);
                slot.env = Arc::new(tokio::sync::Mutex::new(SlotEnv {
                    env,
                    episode_started: false,
                }));
            }
        }
        st.hand_out(shared, idx);
        true
    }

    /// A fresh backend for slot `idx`; `None` keeps the old backend, whose
    /// episode is restarted on its next use anyway.
    fn replacement(&self, idx: usize) -> Option<Box<dyn Environment>> {
        for attempt in 0..3 {
            match (self.shared.factory)(idx) {
                Ok(env) => return Some(env),
                Err(e) => {
                    tracing::error!(pool = %self.shared.name, slot = idx, attempt, error = %e, "replacement failed")
                }
            }
        }
        None
    }

    /// Force-releases every lease older than the lease timeout.
    pub async fn expire_stale_leases(&self, now: Instant) -> Vec<String> {
        let stale: Vec<(Instant, String)> = {
            let st = self.shared.lock();
            let mut stale: Vec<(Instant, String)> = st
                .slots
                .iter()
                .filter_map(|s| s.holder.clone())
                .filter(|(_, at)| now.saturating_duration_since(*at) >= self.shared.config.lease_timeout)
                .map(|(chain, at)| (at, chain))
                .collect();
            stale.sort();
            stale
        };
        let mut reclaimed = Vec::with_capacity(stale.len());
        for (_, chain) in stale {
            if self.release(&chain).await {
                tracing::warn!(pool = %self.shared.name, chain_id = %chain, "lease expired");
                reclaimed.push(chain);
            }
        }
        reclaimed
    }

    pub fn holds_lease(&self, chain_id: &str) -> bool {
        self.shared.lock().leases.contains_key(chain_id)
    }

    /// Chains holding a lease, mapped to their instance IDs.
    pub fn leases(&self) -> BTreeMap<String, String> {
        let st = self.shared.lock();
        st.leases
            .iter()
            .map(|(c, &i)| (c.clone(), st.slots[i].id.clone()))
            .collect()
    }

    pub fn metrics(&self) -> PoolMetrics {
        let st = self.shared.lock();
        let count = |s: InstanceState| st.slots.iter().filter(|x| x.state == s).count();
        PoolMetrics {
            pool: self.shared.name.clone(),
            free: count(InstanceState::Free),
            leased: count(InstanceState::Leased),
            resetting: count(InstanceState::Resetting),
            queued: st.waiters.iter().filter(|w| !w.tx.is_closed()).count(),
            total_acquires: st.total_acquires,
            total_timeouts: st.total_timeouts,
            quarantined: st.quarantined,
            release_warnings: st.release_warnings,
        }
    }

    /// Checks the pool's structural invariants; returns a description of the
    /// first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let st = self.shared.lock();
        if st.slots.len() != self.shared.config.capacity {
            return Err(format!(
                "{} slots for capacity {}",
                st.slots.len(),
                self.shared.config.capacity
            ));
        }
        let mut holders = HashMap::new();
        for (i, s) in st.slots.iter().enumerate() {
            match (s.state, &s.holder) {
                (InstanceState::Leased, Some((chain, _))) => {
                    if st.leases.get(chain) != Some(&i) {
                        return Err(format!("slot {i} leased to {chain:?} but lease map disagrees"));
                    }
                    if holders.insert(chain.clone(), i).is_some() {
                        return Err(format!("chain {chain:?} holds two instances"));
                    }
                }
                (InstanceState::Leased, None) => return Err(format!("slot {i} leased without holder")),
                (_, Some(_)) => return Err(format!("slot {i} has a holder but is not leased")),
                (_, None) => {}
            }
            let in_free = st.free.iter().filter(|&&f| f == i).count();
            let expect = usize::from(s.state == InstanceState::Free);
            if in_free != expect {
                return Err(format!(
                    "slot {i} ({:?}) appears {in_free} times in the free list",
                    s.state
                ));
            }
        }
        if holders.len() != st.leases.len() {
            return Err("lease map has entries without a leased slot".into());
        }
        if !st.free.is_empty() && st.waiters.iter().any(|w| !w.tx.is_closed()) {
            return Err("free instances while acquires are queued".into());
        }
        Ok(())
    }
}

/// Named pools shared by the tool and reward registries.
#[derive(Default)]
pub struct PoolManager {
    pools: RwLock<BTreeMap<String, EnvPool>>,
}

impl fmt::Debug for PoolManager {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PoolManager")
            .field("pools", &self.names())
            .finish()
    }
}

impl PoolManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create_pool(
        &self,
        name: &str,
        config: PoolConfig,
        factory: EnvFactory,
    ) -> Result<EnvPool, PoolError> {
        let mut pools = self.pools.write().unwrap_or_else(|e| e.into_inner());
        if pools.contains_key(name) {
            return Err(PoolError::DuplicatePool(name.to_string()));
        }
        let pool = EnvPool::new(name, config, factory)?;
        pools.insert(name.to_string(), pool.clone());
        Ok(pool)
    }

    pub fn get(&self, name: &str) -> Result<EnvPool, PoolError> {
        self.pools
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(name)
            .cloned()
            .ok_or_else(|| PoolError::UnknownPool(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.pools
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.pools
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .keys()
            .cloned()
            .collect()
    }

    fn all(&self) -> Vec<EnvPool> {
        self.pools
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect()
    }

    pub async fn acquire(&self, pool: &str, chain_id: &str) -> Result<EnvLease, PoolError> {
        self.get(pool)?.acquire(chain_id).await
    }

    pub async fn release(&self, pool: &str, chain_id: &str) -> Result<bool, PoolError> {
        Ok(self.get(pool)?.release(chain_id).await)
    }

    /// Releases the chain's lease in every pool where it holds one.
    pub async fn release_chain(&self, chain_id: &str) -> usize {
        let mut released = 0;
        for pool in self.all() {
            if pool.holds_lease(chain_id) && pool.release(chain_id).await {
                released += 1;
            }
        }
        released
    }

    pub async fn expire_stale_leases(&self, now: Instant) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for pool in self.all() {
            for chain in pool.expire_stale_leases(now).await {
                out.push((pool.name().to_string(), chain));
            }
        }
        out
    }

    /// Periodically expires stale leases until the returned handle is
    /// aborted.
    pub fn spawn_reaper(self: &Arc<Self>, every: Duration) -> tokio::task::JoinHandle<()> {
        let manager = Arc::downgrade(self);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(every);
            loop {
                tick.tick().await;
                let Some(m) = manager.upgrade() else { return };
                m.expire_stale_leases(Instant::now()).await;
            }
        })
    }

    pub fn metrics(&self) -> Vec<PoolMetrics> {
        self.all().iter().map(EnvPool::metrics).collect()
    }

    pub fn total_leased(&self) -> usize {
        self.metrics().iter().map(|m| m.leased).sum()
    }
}
