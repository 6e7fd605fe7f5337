//! Randomized operation schedules over a whole system, with failure
//! injection at every provisioning step.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use metalforge::image_store::ImageKind;
use metalforge::isolation::Health;
use metalforge::orchestrator::{OrchestratorError, ProvisionState, Step, TransitionEntry};
use metalforge::{ImageId, NodeId, TenantId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{tenant, Rig};

use ProvisionState::*;

/// The declared state graph, written out independently of the crate.
pub fn edge_allowed(from: Option<ProvisionState>, to: ProvisionState) -> bool {
    matches!(
        (from, to),
        (None, Allocating)
            | (Some(Allocating), Cloning | Exporting | RolledBack)
            | (Some(Cloning), Exporting | RolledBack)
            | (Some(Exporting), Configuring | RolledBack)
            | (Some(Configuring), Attaching | RolledBack)
            | (Some(Attaching), Ready | RolledBack)
            | (Some(Ready), Booted | Deprovisioning | FailedNode)
            | (Some(Booted), Deprovisioning | FailedNode)
            | (Some(FailedNode), Deprovisioning)
    )
}

/// Checks every record's observed transitions form a path in the graph.
pub fn check_paths(log: &[TransitionEntry]) -> Result<(), String> {
    let mut last: BTreeMap<u64, ProvisionState> = BTreeMap::new();
    for e in log {
        let prev = last.get(&e.id).copied();
        if prev != e.from {
            return Err(format!("record {}: logged from {:?} but was {:?}", e.id, e.from, prev));
        }
        if !edge_allowed(prev, e.to) {
            return Err(format!("record {}: illegal edge {:?} -> {:?}", e.id, prev, e.to));
        }
        last.insert(e.id, e.to);
    }
    Ok(())
}

#[derive(Debug, Default, Clone)]
pub struct ScheduleStats {
    pub ops: usize,
    pub ok: usize,
    pub rollbacks: usize,
    pub by_kind: BTreeMap<&'static str, usize>,
}

/// Runs `ops` random operations. `fault_pct` is the chance that any given
/// provisioning step fails. Sweeps after every operation.
pub fn run_schedule(seed: u64, ops: usize, fault_pct: u64) -> Result<ScheduleStats, String> {
    let rig = Rig::new(6, None);
    let tenants = [tenant("red"), tenant("blue")];
    let mut images: BTreeMap<TenantId, Vec<ImageId>> = BTreeMap::new();
    for t in &tenants {
        let g = rig.golden(t, &format!("{t}-golden"), 6);
        images.entry(t.clone()).or_default().push(g);
    }
    let orch = rig.sys.orchestrator.clone();

    let fault_rng = Arc::new(AtomicU64::new(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1));
    let fr = fault_rng.clone();
    orch.set_fault_hook(Some(Arc::new(move |_step: Step, _node: &NodeId| {
        // xorshift; deterministic given the op order
        let mut x = fr.load(Ordering::Relaxed);
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        fr.store(x, Ordering::Relaxed);
        x % 100 < fault_pct
    })));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = ScheduleStats::default();
    for step in 0..ops {
        let t = &tenants[rng.random_range(0..2)];
        let mine: Vec<_> = orch.list_provisions(t);
        let kind = rng.random_range(0..100);
        let (name, res): (&'static str, Result<(), OrchestratorError>) = match kind {
            0..=34 => {
                let imgs = &images[t];
                let img = imgs[rng.random_range(0..imgs.len())].clone();
                ("provision", orch.provision(&rig.req(t, &img)).map(|_| ()))
            }
            35..=54 if !mine.is_empty() => {
                let r = &mine[rng.random_range(0..mine.len())];
                let keep = rng.random_bool(0.3);
                ("deprovision", orch.deprovision(t, &r.node, keep))
            }
            55..=64 if !mine.is_empty() => {
                let r = &mine[rng.random_range(0..mine.len())];
                let snap = format!("snap-{seed}-{step}");
                let res = orch.snapshot(t, &r.node, &snap);
                if let Ok(id) = &res {
                    images.get_mut(t).unwrap().push(id.clone());
                }
                ("snapshot", res.map(|_| ()))
            }
            65..=72 if !mine.is_empty() => {
                let r = &mine[rng.random_range(0..mine.len())];
                ("fail", orch.mark_failed(&r.node))
            }
            73..=82 if !mine.is_empty() => {
                let r = &mine[rng.random_range(0..mine.len())];
                ("recover", orch.recover(t, &r.node, None).map(|_| ()))
            }
            83..=88 if !mine.is_empty() => {
                let r = &mine[rng.random_range(0..mine.len())];
                ("boot", orch.mark_booted(&r.node))
            }
            89..=93 => {
                // repair one failed free node
                let failed = rig
                    .sys
                    .isolation
                    .list()
                    .into_iter()
                    .find(|n| n.health == Health::Failed && n.owner.is_none());
                match failed {
                    Some(n) => (
                        "repair",
                        rig.sys.isolation.repair(&n.id).map_err(OrchestratorError::from),
                    ),
                    None => ("noop", Ok(())),
                }
            }
            _ => {
                // drop a retained image the tenant no longer needs
                let kept: Vec<_> = rig
                    .sys
                    .store
                    .list_images(t)
                    .into_iter()
                    .filter(|i| &i.tenant == t && i.name.starts_with("kept-") && i.kind != ImageKind::Golden)
                    .collect();
                match kept.first() {
                    Some(i) => (
                        "delete_kept",
                        rig.sys.store.delete_image(t, &i.id).map_err(OrchestratorError::from),
                    ),
                    None => ("noop", Ok(())),
                }
            }
        };
        stats.ops += 1;
        *stats.by_kind.entry(name).or_default() += 1;
        match &res {
            Ok(()) => stats.ok += 1,
            Err(OrchestratorError::Rollback(r)) => {
                stats.rollbacks += 1;
                if !r.compensation_errors.is_empty() {
                    return Err(format!("seed {seed} step {step}: incomplete compensation {r:?}"));
                }
            }
            Err(_) => {}
        }
        let sweep = orch.sweep();
        if !sweep.is_clean() {
            return Err(format!(
                "seed {seed} step {step} after {name} ({res:?}): {:?}",
                sweep.violations
            ));
        }
        let counts = rig.sys.isolation.counts();
        if counts.free + counts.allocated != counts.registered || counts.registered != rig.nodes.len() {
            return Err(format!("seed {seed} step {step}: pool not conserved {counts:?}"));
        }
    }
    check_paths(&orch.transition_log()).map_err(|e| format!("seed {seed}: {e}"))?;
    Ok(stats)
}
