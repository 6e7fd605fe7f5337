mod common;

use common::{golden, tenant, Rig};
use metalforge::netboot::{self, BootScript, NetbootConfig};

#[test]
fn artifacts_match_goldens() {
    assert_eq!(golden::check().unwrap(), 9);
}

#[test]
fn goldens_parse_back() {
    let config = NetbootConfig::default();
    for c in golden::cases() {
        let a = config.generate(&c.node, c.mac, &c.target);
        let stage1 = config.render_stage1(&a);
        assert_eq!(
            netboot::parse_stage1_chain(&stage1).unwrap(),
            netboot::stage2_path(&c.mac)
        );
        let (initiator, gw, target) = BootScript::parse(&a.script.render()).unwrap();
        assert_eq!(initiator, a.descriptor.initiator_name);
        assert_eq!(gw, config.gateway_addr);
        assert_eq!(target, c.target);
        let json: serde_json::Value = serde_json::from_str(&a.descriptor.to_canonical_json()).unwrap();
        assert_eq!(json["target"], c.target.as_str());
    }
}

#[test]
fn installed_tree_matches_generated_files() {
    let dir = tempfile::tempdir().unwrap();
    let rig = Rig::new(2, Some(dir.path()));
    let t = tenant("acme");
    let g = rig.golden(&t, "g", 2);
    let orch = &rig.sys.orchestrator;
    let recs: Vec<_> = (0..2).map(|_| orch.provision(&rig.req(&t, &g)).unwrap()).collect();
    let config = rig.sys.netboot.config().clone();
    let root = dir.path().join("netboot");
    let mut expected = Vec::new();
    for r in &recs {
        let mac = rig.sys.isolation.get(&r.node).unwrap().mac;
        let a = config.generate(&r.node, mac, r.target.as_ref().unwrap());
        for (path, bytes) in config.files(&a) {
            assert_eq!(std::fs::read(root.join(&path)).unwrap(), bytes, "{path}");
            expected.push(path);
        }
    }
    expected.sort();
    assert_eq!(netboot::scan_artifacts(&root).unwrap(), expected);

    orch.deprovision(&t, &recs[0].node, false).unwrap();
    assert_eq!(netboot::scan_artifacts(&root).unwrap().len(), 3);
    drop(rig);
    let reopened = metalforge::System::open(common::config(Some(dir.path()))).unwrap();
    assert_eq!(reopened.netboot.configured_nodes(), vec![recs[1].node.clone()]);
    assert_eq!(netboot::scan_artifacts(&root).unwrap().len(), 3);
}
