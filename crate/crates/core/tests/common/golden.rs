//! Byte-exact goldens for the netboot artifacts. `UPDATE_GOLDEN=1`
//! rewrites them.

use std::path::PathBuf;

use metalforge::netboot::NetbootConfig;
use metalforge::target_gateway::TargetName;
use metalforge::{MacAddress, NodeId};

pub struct Case {
    pub name: &'static str,
    pub node: NodeId,
    pub mac: MacAddress,
    pub target: TargetName,
}

pub fn cases() -> Vec<Case> {
    let case = |name, seq, mac: [u8; 6], target: &str| Case {
        name,
        node: NodeId::from_seq(seq),
        mac: MacAddress::new(mac),
        target: target.parse().unwrap(),
    };
    vec![
        case(
            "basic",
            1,
            [0x52, 0x54, 0x00, 0x12, 0x34, 0x56],
            "iqn.2017-06.org.metalforge:acme:img-00000001",
        ),
        case(
            "high-octets",
            17,
            [0xfe, 0xdc, 0xba, 0x98, 0x76, 0x54],
            "iqn.2017-06.org.metalforge:research-lab:img-00004242",
        ),
        case(
            "read-only",
            240,
            [0x00, 0x1b, 0x21, 0x0a, 0x0b, 0x0c],
            "iqn.2017-06.org.metalforge:t9:img-00000007:ro3",
        ),
    ]
}

pub fn dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn file_names() -> [&'static str; 3] {
    ["stage1.cfg", "stage2.ipxe", "descriptor.json"]
}

/// Compares (or with `UPDATE_GOLDEN=1` rewrites) every golden file.
/// Returns the number of files checked.
pub fn check() -> Result<usize, String> {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some_and(|v| v == "1");
    let config = NetbootConfig::default();
    let mut n = 0;
    for c in cases() {
        let artifacts = config.generate(&c.node, c.mac, &c.target);
        let files = config.files(&artifacts);
        for ((_, bytes), fname) in files.iter().zip(file_names()) {
            let path = dir().join(c.name).join(fname);
            if update {
                std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
                std::fs::write(&path, bytes).map_err(|e| e.to_string())?;
            }
            let want = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            if &want != bytes {
                return Err(format!(
                    "{} differs:\n--- golden\n{}\n--- generated\n{}",
                    path.display(),
                    String::from_utf8_lossy(&want),
                    String::from_utf8_lossy(bytes)
                ));
            }
            n += 1;
        }
    }
    Ok(n)
}
