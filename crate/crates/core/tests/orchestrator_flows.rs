mod common;

use common::schedule::{check_paths, edge_allowed, run_schedule};
use common::{fingerprint, node_is_clean, tenant, Rig};
use metalforge::orchestrator::{OrchestratorError, ProvisionState, Step};

#[test]
fn random_schedules_stay_consistent() {
    for seed in 0..6 {
        let stats = run_schedule(seed, 150, 8).unwrap();
        assert!(stats.rollbacks > 0, "seed {seed}: {stats:?}");
        assert!(stats.ok > stats.ops / 4, "seed {seed}: {stats:?}");
    }
}

#[test]
fn state_graph_oracle_rejects_shortcuts() {
    use ProvisionState::*;
    assert!(edge_allowed(None, Allocating));
    assert!(!edge_allowed(None, Ready));
    assert!(!edge_allowed(Some(Cloning), Ready));
    assert!(!edge_allowed(Some(RolledBack), Allocating));
    assert!(!edge_allowed(Some(Deprovisioning), Ready));
}

#[test]
fn rollback_from_every_step_is_a_legal_path() {
    for step in Step::ALL {
        let rig = Rig::new(1, None);
        let t = tenant("t");
        let g = rig.golden(&t, "g", 4);
        rig.sys.orchestrator.fail_next(step, 1);
        let err = rig.sys.orchestrator.provision(&rig.req(&t, &g)).unwrap_err();
        assert_eq!(err.failing_step(), Some(step));
        assert_eq!(err.code(), "rollback");
        check_paths(&rig.sys.orchestrator.transition_log()).unwrap();
        assert!(node_is_clean(&rig.sys, &rig.nodes[0]));
        rig.assert_clean();
    }
}

#[test]
fn release_and_reacquire_with_kept_image() {
    let rig = Rig::new(2, None);
    let t = tenant("t");
    let g = rig.golden(&t, "g", 4);
    let orch = &rig.sys.orchestrator;
    let r = orch.provision(&rig.req(&t, &g)).unwrap();
    let target = r.target.clone().unwrap();
    rig.sys
        .gateway
        .target_write(&r.node, &target, 4096, b"tenant state")
        .unwrap();
    orch.deprovision(&t, &r.node, true).unwrap();
    let kept = rig.sys.store.find_by_name(&t, &format!("kept-{}", r.id)).unwrap();
    assert_eq!(Some(&kept), r.clone_image.as_ref());

    let again = orch
        .provision(&metalforge::orchestrator::ProvisionRequest {
            node: Some(rig.nodes[1].clone()),
            ..rig.req(&t, &kept)
        })
        .unwrap();
    let data = rig
        .sys
        .gateway
        .target_read(&again.node, again.target.as_ref().unwrap(), 4096, 12)
        .unwrap();
    assert_eq!(data, b"tenant state");
    rig.assert_clean();
}

#[test]
fn snapshot_fans_out_to_identical_nodes() {
    let rig = Rig::new(4, None);
    let t = tenant("t");
    let g = rig.golden(&t, "g", 8);
    let orch = &rig.sys.orchestrator;
    let r = orch.provision(&rig.req(&t, &g)).unwrap();
    let target = r.target.clone().unwrap();
    rig.sys
        .gateway
        .target_write(&r.node, &target, 100, &[0xab; 5000])
        .unwrap();
    let before = rig.sys.gateway.target_read(&r.node, &target, 0, 8 * 4096).unwrap();
    let flattens = rig.sys.store.stats().flattens;
    let snap = orch.snapshot(&t, &r.node, "base").unwrap();
    assert_eq!(rig.sys.store.stats().flattens, flattens + 1);
    let after = rig.sys.gateway.target_read(&r.node, &target, 0, 8 * 4096).unwrap();
    assert_eq!(before, after);

    let copies = rig.sys.store.stats().blocks_copied;
    let clones: Vec<_> = (0..3).map(|_| orch.provision(&rig.req(&t, &snap)).unwrap()).collect();
    assert_eq!(rig.sys.store.stats().blocks_copied, copies);
    for c in &clones {
        let got = rig
            .sys
            .gateway
            .target_read(&c.node, c.target.as_ref().unwrap(), 0, 8 * 4096)
            .unwrap();
        assert_eq!(got, before);
    }
    rig.sys.gateway.target_write(&r.node, &target, 100, &[1; 10]).unwrap();
    assert_eq!(rig.sys.store.read_range(&snap, 100, 10).unwrap(), vec![0xab; 10]);
    rig.assert_clean();
}

#[test]
fn recover_carries_marker_to_new_node() {
    let rig = Rig::new(2, None);
    let t = tenant("t");
    let g = rig.golden(&t, "g", 4);
    let orch = &rig.sys.orchestrator;
    let a = orch.provision(&rig.req(&t, &g)).unwrap();
    rig.sys
        .gateway
        .target_write(&a.node, a.target.as_ref().unwrap(), 9000, b"marker")
        .unwrap();
    orch.mark_failed(&a.node).unwrap();
    let copies = rig.sys.store.stats().blocks_copied;
    let b = orch.recover(&t, &a.node, None).unwrap();
    assert_eq!(rig.sys.store.stats().blocks_copied, copies);
    let got = rig
        .sys
        .gateway
        .target_read(&b.node, b.target.as_ref().unwrap(), 9000, 6)
        .unwrap();
    assert_eq!(got, b"marker");
    assert!(rig
        .sys
        .gateway
        .target_read(&a.node, a.target.as_ref().unwrap(), 0, 1)
        .is_err());
    rig.assert_clean();
}

#[test]
fn rejected_requests_change_nothing() {
    let rig = Rig::new(1, None);
    let t = tenant("t");
    let g = rig.golden(&t, "g", 4);
    let orch = &rig.sys.orchestrator;
    let r = orch.provision(&rig.req(&t, &g)).unwrap();
    let fp = fingerprint(&rig.sys);
    assert!(matches!(
        orch.provision(&rig.req(&t, &g)),
        Err(OrchestratorError::PoolExhausted)
    ));
    assert!(matches!(
        orch.recover(&t, &r.node, None),
        Err(OrchestratorError::NodeNotFailed(_))
    ));
    assert!(matches!(
        orch.deprovision(&t, &metalforge::NodeId::from_seq(40), false),
        Err(OrchestratorError::NotFound(_))
    ));
    assert!(matches!(
        orch.snapshot(&t, &r.node, "kept-1"),
        Err(OrchestratorError::InvalidName(_))
    ));
    assert_eq!(fp, fingerprint(&rig.sys));
}

#[test]
fn parallel_provisions_share_one_golden() {
    let rig = Rig::new(24, None);
    let t = tenant("t");
    let g = rig.golden(&t, "g", 16);
    let copies = rig.sys.store.stats().blocks_copied;
    std::thread::scope(|s| {
        for _ in 0..24 {
            s.spawn(|| rig.sys.orchestrator.provision(&rig.req(&t, &g)).unwrap());
        }
    });
    assert_eq!(rig.sys.store.get(&g).unwrap().child_count, 24);
    assert_eq!(rig.sys.store.stats().blocks_copied, copies);
    assert!(rig
        .sys
        .orchestrator
        .all_records()
        .iter()
        .all(|r| r.state == ProvisionState::Ready));
    check_paths(&rig.sys.orchestrator.transition_log()).unwrap();
    rig.assert_clean();
}
