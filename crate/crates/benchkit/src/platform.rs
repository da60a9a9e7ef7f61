//! Host platform descriptor captured with every experiment point. The
//! hostname is stored as a hash, not in the clear.

use serde_json::{json, Value};

pub fn describe() -> Value {
    json!({
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "cpu_model": cpu_model(),
        "logical_cores": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        "hostname_hash": hostname_hash(),
    })
}

fn cpu_model() -> String {
    #[cfg(target_os = "linux")]
    {
        if let Ok(info) = std::fs::read_to_string("/proc/cpuinfo") {
            for line in info.lines() {
                if let Some(rest) = line.strip_prefix("model name") {
                    if let Some((_, value)) = rest.split_once(':') {
                        return value.trim().to_string();
                    }
                }
            }
        }
    }
    "unknown".to_string()
}

fn hostname_hash() -> String {
    use sha2::Digest;
    let name = hostname().unwrap_or_else(|| "unknown-host".to_string());
    hex::encode(&sha2::Sha256::digest(name.as_bytes())[..8])
}

#[cfg(unix)]
fn hostname() -> Option<String> {
    let mut buf = [0u8; 256];
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr() as *mut libc::c_char, buf.len()) };
    if rc != 0 {
        return None;
    }
    let len = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
    Some(String::from_utf8_lossy(&buf[..len]).into_owned())
}

#[cfg(not(unix))]
fn hostname() -> Option<String> {
    std::env::var("COMPUTERNAME").ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_has_expected_fields_and_no_raw_hostname() {
        let d = describe();
        assert!(d.get("os").and_then(Value::as_str).is_some());
        assert!(d.get("arch").and_then(Value::as_str).is_some());
        assert!(d.get("logical_cores").and_then(Value::as_u64).unwrap() >= 1);
        let hash = d.get("hostname_hash").and_then(Value::as_str).unwrap();
        assert_eq!(hash.len(), 16);
        if let Some(name) = hostname() {
            if !name.is_empty() {
                assert_ne!(hash, name);
            }
        }
    }
}
