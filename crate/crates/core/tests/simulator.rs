mod common;

use metalforge::bench::{Lab, LabConfig};
use metalforge::node_simulator::pattern::{self, Access, AccessPattern, PAGE};
use metalforge::node_simulator::{
    default_log_append, default_os_boot, default_read_heavy, SimError, SimNode, SimNodeConfig, METADATA_PROBE,
};
use metalforge::orchestrator::ProvisionState;
use proptest::prelude::*;

fn lab(nodes: usize, mib: u64) -> Lab {
    Lab::new(LabConfig {
        nodes,
        image_size: mib << 20,
        ..LabConfig::default()
    })
    .unwrap()
}

/// Unique bytes a pattern touches, counted independently of the crate.
fn unique_bytes(p: &AccessPattern) -> u64 {
    let mut pages = std::collections::HashSet::new();
    for a in &p.entries {
        if a.len > 0 {
            for pg in a.offset / 4096..=(a.offset + a.len - 1) / 4096 {
                pages.insert(pg);
            }
        }
    }
    pages.len() as u64 * 4096
}

#[test]
fn boot_reads_a_small_fraction() {
    let lab = lab(1, 64);
    let rec = lab.provision(&lab.golden.clone()).unwrap();
    let pat = default_os_boot();
    let report = lab.sim(&rec.node).lock().power_on(&lab.env(1), &pat).unwrap();
    let ratio = report.bytes_read as f64 / (64u64 << 20) as f64 * 100.0;
    assert!((1.6..=2.6).contains(&ratio), "{ratio:.3}%");
    assert!(report.bytes_read <= unique_bytes(&pat) + METADATA_PROBE);
    assert_eq!(report.wall_time_us, report.phases.iter().map(|p| p.us).sum::<u64>());
    let traffic = lab.sys.orchestrator.get_traffic(&lab.tenant, &rec.node).unwrap();
    assert_eq!(traffic.bytes_read, report.bytes_read);

    let warm = lab.sim(&rec.node).lock().power_on(&lab.env(1), &pat).unwrap();
    assert!(warm.bytes_read <= METADATA_PROBE, "{}", warm.bytes_read);
}

#[test]
fn boot_needs_config_and_network() {
    let lab = lab(2, 8);
    let pat = pattern::os_boot(8 << 20, 1);
    let idle = lab.sys.isolation.list()[1].id.clone();
    let err = lab.sim(&idle).lock().power_on(&lab.env(1), &pat).unwrap_err();
    assert!(matches!(err, SimError::NoConfig(_)), "{err}");

    let rec = lab.provision(&lab.golden.clone()).unwrap();
    lab.sys.isolation.detach_network(&rec.node).unwrap();
    let err = lab.sim(&rec.node).lock().power_on(&lab.env(1), &pat).unwrap_err();
    assert!(matches!(err, SimError::AccessDenied), "{err}");
}

#[test]
fn deleted_target_is_gone_for_a_running_node() {
    let lab = lab(1, 8);
    let rec = lab.provision(&lab.golden.clone()).unwrap();
    let sim = lab.sim(&rec.node);
    sim.lock().power_on(&lab.env(1), &pattern::os_boot(8 << 20, 1)).unwrap();
    lab.sys.orchestrator.deprovision(&lab.tenant, &rec.node, false).unwrap();
    sim.lock().drop_cache();
    let err = sim.lock().read(0, 4096).unwrap_err();
    assert!(matches!(err, SimError::TargetGone), "{err}");
}

#[test]
fn uncached_node_reads_every_access() {
    let lab = lab(1, 8);
    let rec = lab.provision(&lab.golden.clone()).unwrap();
    let node = lab.sys.isolation.get(&rec.node).unwrap();
    let mut sim = SimNode::new(SimNodeConfig {
        cache_pages: 0,
        ..SimNodeConfig::new(node.id, node.mac, &lab.profile)
    });
    let pat = AccessPattern::new(
        "repeats",
        vec![Access::read(0, 4096), Access::read(0, 4096), Access::read(8192, 100)],
    );
    let report = sim.power_on(&lab.env(1), &pat).unwrap();
    assert_eq!(report.bytes_read, METADATA_PROBE + 2 * 4096 + 4096);
}

#[test]
fn workload_curves() {
    let lab = lab(1, 64);
    let rec = lab.provision(&lab.golden.clone()).unwrap();
    let sim = lab.sim(&rec.node);
    let env = lab.env(1);
    let empty = AccessPattern::new("empty", Vec::new());
    let err = sim.lock().run_workload(&env, &empty, 1).unwrap_err();
    assert!(matches!(err, SimError::NotBooted));
    sim.lock().power_on(&env, &default_os_boot()).unwrap();

    let reads = sim.lock().run_workload(&env, &default_read_heavy(), 5).unwrap();
    let r: Vec<u64> = reads.iter().map(|d| d.bytes_read).collect();
    assert!(r[0] > 0 && r.windows(2).all(|w| w[1] <= w[0]) && r[4] == 0, "{r:?}");

    let writes = sim.lock().run_workload(&env, &default_log_append(), 5).unwrap();
    let w: Vec<u64> = writes.iter().map(|d| d.bytes_written).collect();
    assert!(w[0] > 0 && w.iter().all(|&x| x == w[0]), "{w:?}");
    assert_eq!(w[0], default_log_append().write_bytes());

    let none = sim.lock().run_workload(&env, &empty, 3).unwrap();
    assert!(none.iter().all(|d| d.bytes_read == 0 && d.bytes_written == 0));
}

#[test]
fn identical_inputs_give_identical_reports() {
    let run = || {
        let lab = lab(1, 16);
        let rec = lab.provision(&lab.golden.clone()).unwrap();
        let r = lab.boot(&rec.node, 3).unwrap();
        let mut json: serde_json::Value = serde_json::from_str(&r.to_canonical_json()).unwrap();
        json.as_object_mut().unwrap().remove("node");
        json
    };
    assert_eq!(run(), run());
}

#[test]
fn failure_then_recovery_boots_same_disk() {
    let lab = lab(2, 16);
    let rec = lab.provision(&lab.golden.clone()).unwrap();
    let env = lab.env(1);
    let sim = lab.sim(&rec.node);
    assert!(matches!(sim.lock().inject_failure(&env), Err(SimError::NotBooted)));
    lab.boot(&rec.node, 1).unwrap();
    sim.lock().write(1 << 20, b"survives failure").unwrap();
    sim.lock().inject_failure(&env).unwrap();
    sim.lock().inject_failure(&env).unwrap();
    assert!(matches!(sim.lock().read(0, 1), Err(SimError::NotBooted)));
    assert_eq!(
        lab.sys.isolation.get(&rec.node).unwrap().health,
        metalforge::isolation::Health::Failed
    );
    lab.sys.orchestrator.mark_failed(&rec.node).unwrap();
    let state = lab.sys.orchestrator.get_record(&lab.tenant, &rec.node).unwrap().state;
    assert_eq!(state, ProvisionState::FailedNode);

    let new = lab.sys.orchestrator.recover(&lab.tenant, &rec.node, None).unwrap();
    let report = lab.boot(&new.node, 1).unwrap();
    assert_eq!(Some(report.target), new.target);
    assert_eq!(
        lab.sim(&new.node).lock().read(1 << 20, 16).unwrap(),
        b"survives failure"
    );
}

#[test]
fn block_writes_are_never_torn() {
    let lab = lab(1, 8);
    let rec = lab.provision(&lab.golden.clone()).unwrap();
    let target = rec.target.clone().unwrap();
    let gw = lab.sys.gateway.clone();
    let block = lab.sys.store.block_size() as usize;
    gw.target_write(&rec.node, &target, 0, &vec![0x22; block]).unwrap();
    std::thread::scope(|s| {
        let writer = s.spawn(|| {
            for i in 0..200u32 {
                let fill = if i % 2 == 0 { 0x11 } else { 0x22 };
                gw.target_write(&rec.node, &target, 0, &vec![fill; block]).unwrap();
            }
        });
        while !writer.is_finished() {
            let got = gw.target_read(&rec.node, &target, 0, block as u64).unwrap();
            assert!(got.iter().all(|&b| b == got[0]), "torn block");
        }
    });
}

#[test]
fn two_dozen_nodes_boot_together() {
    let lab = lab(24, 16);
    let golden = lab.golden.clone();
    let recs: Vec<_> = (0..24).map(|_| lab.provision(&golden).unwrap()).collect();
    let reports: Vec<_> = std::thread::scope(|s| {
        let hs: Vec<_> = recs
            .iter()
            .map(|r| s.spawn(|| lab.boot(&r.node, 24).unwrap()))
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert!(reports.windows(2).all(|w| w[0].bytes_read == w[1].bytes_read));
    assert!(lab.sys.orchestrator.sweep().is_clean());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn boot_traffic_bounded_by_unique_pages(
        accesses in proptest::collection::vec((0u64..2048, 1u64..20_000, any::<bool>()), 0..40)
    ) {
        let lab = lab(1, 8);
        let rec = lab.provision(&lab.golden.clone()).unwrap();
        let entries = accesses
            .into_iter()
            .map(|(page, len, w)| {
                let off = page * PAGE;
                let len = len.min((8 << 20) - off);
                if w { Access::write(off, len, page) } else { Access::read(off, len) }
            })
            .collect();
        let pat = AccessPattern::new("random", entries);
        let report = lab.sim(&rec.node).lock().power_on(&lab.env(1), &pat).unwrap();
        prop_assert!(report.bytes_read <= unique_bytes(&pat) + METADATA_PROBE);
    }
}
