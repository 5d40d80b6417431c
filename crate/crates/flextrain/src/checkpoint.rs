//! Network checkpoint format: a human-readable key/value manifest followed by
//! the raw little-endian f64 arrays concatenated in manifest order.
//!
//! The manifest ends at the first blank line; everything after it is binary.
//! Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamArrays, ResidualNet};

pub const FORMAT_VERSION: u32 = 1;

/// Serialize a network to checkpoint bytes.
pub fn to_bytes(net: &ResidualNet) -> Vec<u8> {
    let arrays = net.params().arrays();
    let mut manifest = String::new();
    manifest.push_str(&format!("format_version={FORMAT_VERSION}\n"));
    manifest.push_str(&format!("K={}\n", net.num_blocks()));
    manifest.push_str(&format!("input_dim={}\n", net.input_dim()));
    manifest.push_str(&format!("hidden_dim={}\n", net.hidden_dim()));
    manifest.push_str(&format!("num_classes={}\n", net.num_classes()));
    manifest.push_str(&format!("seed={}\n", net.seed()));
    let order: Vec<String> = arrays.iter().map(|(name, a)| format!("{name}[{}]", a.len())).collect();
    manifest.push_str(&format!("arrays={}\n", order.join(",")));
    manifest.push('\n');

    let mut out = manifest.into_bytes();
    for (_, a) in &arrays {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parse checkpoint bytes back into a network.
pub fn from_bytes(bytes: &[u8]) -> Result<ResidualNet> {
    let sep = find_blank_line(bytes)
        .ok_or_else(|| Error::Checkpoint("missing blank line after manifest".into()))?;
    // keep the first newline of the pair so lines() yields no empty tail
    let manifest = std::str::from_utf8(&bytes[..sep - 1])
        .map_err(|_| Error::Checkpoint("manifest is not utf-8".into()))?;
    let mut format_version = None;
    let mut num_blocks = None;
    let mut input_dim = None;
    let mut hidden_dim = None;
    let mut num_classes = None;
    let mut seed = None;
    let mut order: Option<Vec<(String, usize)>> = None;
    for line in manifest.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed manifest line: {line}")))?;
        match key {
            "format_version" => format_version = Some(parse_usize(key, value)?),
            "K" => num_blocks = Some(parse_usize(key, value)?),
            "input_dim" => input_dim = Some(parse_usize(key, value)?),
            "hidden_dim" => hidden_dim = Some(parse_usize(key, value)?),
            "num_classes" => num_classes = Some(parse_usize(key, value)?),
            "seed" => {
                seed = Some(value.parse::<u64>().map_err(|_| {
                    Error::Checkpoint(format!("manifest key {key} has invalid value {value}"))
                })?)
            }
            "arrays" => order = Some(parse_order(value)?),
            other => return Err(Error::Checkpoint(format!("unknown manifest key: {other}"))),
        }
    }
    let format_version =
        format_version.ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
    if format_version != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported format_version {format_version}")));
    }
    let num_blocks = num_blocks.ok_or_else(|| Error::Checkpoint("missing K".into()))?;
    let input_dim = input_dim.ok_or_else(|| Error::Checkpoint("missing input_dim".into()))?;
    let hidden_dim = hidden_dim.ok_or_else(|| Error::Checkpoint("missing hidden_dim".into()))?;
    let num_classes = num_classes.ok_or_else(|| Error::Checkpoint("missing num_classes".into()))?;
    let seed = seed.ok_or_else(|| Error::Checkpoint("missing seed".into()))?;
    let order = order.ok_or_else(|| Error::Checkpoint("missing arrays".into()))?;
    if input_dim == 0 || hidden_dim == 0 || num_classes == 0 || num_blocks == 0 {
        return Err(Error::Checkpoint("manifest dimensions must all be >= 1".into()));
    }

    // Build a zeroed net of the right shape, then overwrite array by array in
    // manifest order, validating names and lengths as we go.
    let mut net = ResidualNet::from_parts(
        input_dim,
        hidden_dim,
        num_classes,
        ParamArrays::zeros(input_dim, hidden_dim, num_classes, num_blocks),
        seed,
    );
    let expected: Vec<(String, usize)> = net
        .params()
        .arrays()
        .iter()
        .map(|(name, a)| (name.clone(), a.len()))
        .collect();
    if order != expected {
        return Err(Error::Checkpoint("array order list does not match network shape".into()));
    }
    let total: usize = expected.iter().map(|(_, len)| len).sum();
    let payload = &bytes[sep..];
    if payload.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, expected {}",
            payload.len(),
            total * 8
        )));
    }
    let mut offset = 0;
    for a in net.params_mut().arrays_mut() {
        for v in a.iter_mut() {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&payload[offset..offset + 8]);
            *v = f64::from_le_bytes(buf);
            offset += 8;
        }
    }
    Ok(net)
}

pub fn save(net: &ResidualNet, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ResidualNet> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

/// Size in bytes of the checkpoint encoding; used for simulated wire
/// accounting in the federated runner.
pub fn byte_size(net: &ResidualNet) -> u64 {
    to_bytes(net).len() as u64
}

fn find_blank_line(bytes: &[u8]) -> Option<usize> {
    bytes.windows(2).position(|w| w == b"\n\n").map(|p| p + 2)
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| Error::Checkpoint(format!("manifest key {key} has invalid value {value}")))
}

fn parse_order(value: &str) -> Result<Vec<(String, usize)>> {
    let mut out = Vec::new();
    for entry in value.split(',') {
        let open = entry
            .find('[')
            .ok_or_else(|| Error::Checkpoint(format!("malformed array entry: {entry}")))?;
        if !entry.ends_with(']') {
            return Err(Error::Checkpoint(format!("malformed array entry: {entry}")));
        }
        let name = entry[..open].to_string();
        let len = parse_usize("arrays", &entry[open + 1..entry.len() - 1])?;
        out.push((name, len));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_net;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = init_net(3, 5, 4, 3, 99).unwrap();
        let bytes = to_bytes(&net);
        let restored = from_bytes(&bytes).unwrap();
        assert!(net.weights_equal(&restored));
        assert_eq!(net.seed(), restored.seed());
        assert_eq!(bytes, to_bytes(&restored));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let net = init_net(2, 3, 2, 2, 1).unwrap();
        let mut bytes = to_bytes(&net);
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn prefix_checkpoint_is_smaller() {
        let net = init_net(2, 8, 3, 6, 5).unwrap();
        let full = byte_size(&net);
        let prefix = byte_size(&net.prefix_clone(2).unwrap());
        assert!(prefix < full);
    }
}
