//! Cross-tenant access matrix: every operation one tenant attempts on the
//! other's resources must be denied and leave no trace.

use metalforge::image_store::StoreError;
use metalforge::orchestrator::OrchestratorError;
use metalforge::target_gateway::wire::Status;
use metalforge::target_gateway::{GatewayError, Session};
use metalforge::{ImageId, NodeId, TenantId};

use super::{fingerprint, tenant, Rig};

struct Side {
    t: TenantId,
    golden: ImageId,
    node: NodeId,
    clone: ImageId,
    target: metalforge::target_gateway::TargetName,
}

type Attempt = (&'static str, bool);

fn attempts(rig: &Rig, me: &Side, other: &Side) -> Vec<Attempt> {
    let store = &rig.sys.store;
    let gw = &rig.sys.gateway;
    let orch = &rig.sys.orchestrator;
    let store_denied = |r: Result<_, StoreError>| matches!(r, Err(StoreError::AccessDenied { .. }));
    let gw_denied = |r: Result<_, GatewayError>| matches!(r, Err(GatewayError::AccessDenied));
    let orch_denied = |r: Result<_, OrchestratorError>| matches!(r, Err(OrchestratorError::AccessDenied));
    let session = Session::new(gw.clone(), me.node.clone(), other.target.clone());
    vec![
        (
            "read image",
            store_denied(store.export_bytes(&me.t, &other.golden).map(|_| ())),
        ),
        (
            "read clone",
            store_denied(store.export_bytes(&me.t, &other.clone).map(|_| ())),
        ),
        (
            "describe image",
            store_denied(store.get_for(&me.t, &other.golden).map(|_| ())),
        ),
        (
            "linked clone",
            store_denied(store.linked_clone(&me.t, &other.golden, "stolen").map(|_| ())),
        ),
        (
            "deep copy",
            store_denied(store.deep_copy(&me.t, &other.golden, "stolen").map(|_| ())),
        ),
        ("delete image", store_denied(store.delete_image(&me.t, &other.golden))),
        (
            "rename image",
            store_denied(store.rename_image(&me.t, &other.golden, "mine")),
        ),
        (
            "share image",
            store_denied(store.share_image(&me.t, &other.golden, &me.t)),
        ),
        (
            "provision from image",
            orch_denied(orch.provision(&rig.req(&me.t, &other.golden)).map(|_| ())),
        ),
        ("provision onto node", {
            let mut req = rig.req(&me.t, &me.golden);
            req.node = Some(other.node.clone());
            matches!(
                orch.provision(&req),
                Err(OrchestratorError::AccessDenied | OrchestratorError::NodeBusy(_))
            )
        }),
        (
            "target read",
            gw_denied(gw.target_read(&me.node, &other.target, 0, 512).map(|_| ())),
        ),
        (
            "target write",
            gw_denied(gw.target_write(&me.node, &other.target, 0, b"x")),
        ),
        (
            "target capacity",
            gw_denied(gw.target_capacity(&me.node, &other.target).map(|_| ())),
        ),
        (
            "wire read",
            matches!(session.read(0, 512), Err(e) if e.status == Status::AccessDenied),
        ),
        (
            "wire write",
            matches!(session.write(0, b"x"), Err(e) if e.status == Status::AccessDenied),
        ),
        ("delete target", gw_denied(gw.delete_target(&me.t, &other.target))),
        ("deprovision", orch_denied(orch.deprovision(&me.t, &other.node, false))),
        (
            "snapshot",
            orch_denied(orch.snapshot(&me.t, &other.node, "stolen").map(|_| ())),
        ),
        (
            "recover",
            orch_denied(orch.recover(&me.t, &other.node, None).map(|_| ())),
        ),
        ("record", orch_denied(orch.get_record(&me.t, &other.node).map(|_| ()))),
        ("traffic", orch_denied(orch.get_traffic(&me.t, &other.node).map(|_| ()))),
    ]
}

/// Runs the matrix in both directions. Returns the number of cells checked.
pub fn run() -> Result<usize, String> {
    let rig = Rig::new(4, None);
    let sides: Vec<Side> = ["alpha", "beta"]
        .iter()
        .map(|name| {
            let t = tenant(name);
            let golden = rig.golden(&t, &format!("{name}-golden"), 4);
            let rec = rig.sys.orchestrator.provision(&rig.req(&t, &golden)).unwrap();
            Side {
                clone: rec.clone_image.clone().unwrap(),
                target: rec.target.clone().unwrap(),
                node: rec.node,
                golden,
                t,
            }
        })
        .collect();
    let before = fingerprint(&rig.sys);
    let mut cells = 0;
    for (me, other) in [(&sides[0], &sides[1]), (&sides[1], &sides[0])] {
        for (op, denied) in attempts(&rig, me, other) {
            if !denied {
                return Err(format!("{} -> {}: {op} was not denied", me.t, other.t));
            }
            let now = fingerprint(&rig.sys);
            if now != before {
                return Err(format!("{} -> {}: {op} changed state", me.t, other.t));
            }
            cells += 1;
        }
    }
    // the owners still have full access
    for s in &sides {
        rig.sys
            .gateway
            .target_read(&s.node, &s.target, 0, 512)
            .map_err(|e| e.to_string())?;
        rig.sys.store.export_bytes(&s.t, &s.golden).map_err(|e| e.to_string())?;
    }
    Ok(cells)
}
