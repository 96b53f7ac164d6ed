//! Backend-profile bundle: the text manifest consumed by `program()`.
//!
//! ```text
//! # user logic for a vector build
//! device "Vector processor" priority 150 params{lanes=4}
//! bind "GEMM" -> "Vector processor":"gemm"
//! ```

use crate::kernels::DeviceProfile;

use super::RunnerError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelBinding {
    pub op: String,
    pub device: String,
    pub kernel_id: String,
}

/// A parsed bundle: the user-logic devices and their kernel bindings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileBundle {
    pub devices: Vec<DeviceProfile>,
    pub bindings: Vec<KernelBinding>,
}

impl ProfileBundle {
    pub fn parse(text: &str) -> Result<Self, RunnerError> {
        let mut bundle = ProfileBundle::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| RunnerError::BundleParse {
                line: lineno + 1,
                msg,
            };
            if let Some(rest) = line.strip_prefix("device ") {
                bundle.devices.push(parse_device(rest.trim()).map_err(err)?);
            } else if let Some(rest) = line.strip_prefix("bind ") {
                bundle.bindings.push(parse_bind(rest.trim()).map_err(err)?);
            } else {
                return Err(err(format!("expected 'device' or 'bind', found {line:?}")));
            }
        }
        Ok(bundle)
    }
}

fn take_quoted(s: &str) -> Result<(String, &str), String> {
    let s = s.trim_start();
    let rest = s
        .strip_prefix('"')
        .ok_or_else(|| format!("expected quoted name at {s:?}"))?;
    let end = rest
        .find('"')
        .ok_or_else(|| format!("unterminated quote in {s:?}"))?;
    Ok((rest[..end].to_string(), &rest[end + 1..]))
}

fn parse_device(s: &str) -> Result<DeviceProfile, String> {
    let (name, rest) = take_quoted(s)?;
    if name.is_empty() {
        return Err("device name must not be empty".into());
    }
    let rest = rest.trim();
    let rest = rest
        .strip_prefix("priority")
        .ok_or_else(|| format!("expected 'priority' after device name, found {rest:?}"))?
        .trim_start();
    let (num, rest) = match rest.find(|c: char| !(c.is_ascii_digit() || c == '-' || c == '+')) {
        Some(i) => rest.split_at(i),
        None => (rest, ""),
    };
    let priority: i64 = num
        .parse()
        .map_err(|_| format!("bad priority value {num:?}"))?;
    let mut profile = DeviceProfile::new(&name, priority);

    let rest = rest.trim();
    if rest.is_empty() {
        return Ok(profile);
    }
    let body = rest
        .strip_prefix("params{")
        .and_then(|r| r.strip_suffix('}'))
        .ok_or_else(|| format!("expected params{{k=v,...}}, found {rest:?}"))?;
    for pair in body.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("bad param {pair:?}"))?;
        let v: u64 = v
            .trim()
            .parse()
            .map_err(|_| format!("bad param value {pair:?}"))?;
        profile.params.insert(k.trim().to_string(), v);
    }
    Ok(profile)
}

fn parse_bind(s: &str) -> Result<KernelBinding, String> {
    let (op, rest) = take_quoted(s)?;
    let rest = rest
        .trim_start()
        .strip_prefix("->")
        .ok_or_else(|| format!("expected '->' after op name, found {rest:?}"))?;
    let (device, rest) = take_quoted(rest)?;
    let rest = rest
        .trim_start()
        .strip_prefix(':')
        .ok_or_else(|| format!("expected ':' between device and kernel id, found {rest:?}"))?;
    let (kernel_id, rest) = take_quoted(rest)?;
    if !rest.trim().is_empty() {
        return Err(format!("trailing input after bind: {rest:?}"));
    }
    if op.is_empty() || device.is_empty() || kernel_id.is_empty() {
        return Err("bind names must not be empty".into());
    }
    Ok(KernelBinding {
        op,
        device,
        kernel_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_devices_and_binds() {
        let text = r#"
# vector-only user logic
device "Vector processor" priority 150 params{lanes=4}
device "Minimal" priority -5
bind "GEMM" -> "Vector processor":"gemm"
"#;
        let b = ProfileBundle::parse(text).unwrap();
        assert_eq!(b.devices.len(), 2);
        assert_eq!(b.devices[0].name, "Vector processor");
        assert_eq!(b.devices[0].priority, 150);
        assert_eq!(b.devices[0].params.get("lanes"), Some(&4));
        assert_eq!(b.devices[1].priority, -5);
        assert_eq!(
            b.bindings,
            vec![KernelBinding {
                op: "GEMM".into(),
                device: "Vector processor".into(),
                kernel_id: "gemm".into(),
            }]
        );
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(matches!(
            ProfileBundle::parse("device Vector priority 1"),
            Err(RunnerError::BundleParse { line: 1, .. })
        ));
        assert!(matches!(
            ProfileBundle::parse("bind \"GEMM\" \"V\":\"gemm\""),
            Err(RunnerError::BundleParse { line: 1, .. })
        ));
        assert!(matches!(
            ProfileBundle::parse("nonsense"),
            Err(RunnerError::BundleParse { line: 1, .. })
        ));
    }

    #[test]
    fn empty_bundle_is_valid() {
        let b = ProfileBundle::parse("# nothing\n").unwrap();
        assert!(b.devices.is_empty() && b.bindings.is_empty());
    }
}
