//! Crash cut-point enumeration: an operation is killed before each of its
//! journal commits in turn and the system is restarted from disk.

use metalforge::journal::CrashMode;
use metalforge::{ImageId, System, TenantId};

use super::{config, tenant, Rig};

pub struct Setup {
    pub rig: Rig,
    pub t: TenantId,
    pub golden: ImageId,
}

pub fn setup(root: &std::path::Path, provisioned: bool, failed: bool) -> Setup {
    let rig = Rig::new(3, Some(root));
    let t = tenant("t");
    let golden = rig.golden(&t, "g", 6);
    if provisioned {
        let r = rig.sys.orchestrator.provision(&rig.req(&t, &golden)).unwrap();
        rig.sys
            .gateway
            .target_write(&r.node, r.target.as_ref().unwrap(), 5000, b"durable")
            .unwrap();
        if failed {
            rig.sys.orchestrator.mark_failed(&r.node).unwrap();
        }
    }
    Setup { rig, t, golden }
}

pub type Op = fn(&Setup) -> bool;

pub fn provision(s: &Setup) -> bool {
    s.rig.sys.orchestrator.provision(&s.rig.req(&s.t, &s.golden)).is_ok()
}

pub fn deprovision(s: &Setup) -> bool {
    s.rig.sys.orchestrator.deprovision(&s.t, &s.rig.nodes[0], false).is_ok()
}

pub fn snapshot(s: &Setup) -> bool {
    s.rig.sys.orchestrator.snapshot(&s.t, &s.rig.nodes[0], "ckpt").is_ok()
}

pub fn recover(s: &Setup) -> bool {
    s.rig.sys.orchestrator.recover(&s.t, &s.rig.nodes[0], None).is_ok()
}

/// Crashes `op` before each of its commits in turn (and once after the
/// last), restarts from disk and checks the global invariants.
pub fn enumerate(op: Op, provisioned: bool, failed: bool, check: impl Fn(&System, u64, u64)) -> u64 {
    let dir = tempfile::tempdir().unwrap();
    let total = {
        let s = setup(dir.path(), provisioned, failed);
        let before = s.rig.sys.journal.commits();
        assert!(op(&s));
        s.rig.sys.journal.commits() - before
    };
    for k in 0..=total {
        for mode in [CrashMode::Clean, CrashMode::Torn] {
            let dir = tempfile::tempdir().unwrap();
            {
                let s = setup(dir.path(), provisioned, failed);
                let base = s.rig.sys.journal.commits();
                s.rig.sys.journal.crash_at(base + k, mode);
                let ok = op(&s);
                assert_eq!(ok, k == total, "cut {k}/{total} {mode:?}");
            }
            let sys = System::open(config(Some(dir.path()))).unwrap();
            let sweep = sys.orchestrator.sweep();
            assert!(sweep.is_clean(), "cut {k}/{total} {mode:?}: {:#?}", sweep.violations);
            check(&sys, k, total);
        }
    }
    total
}
