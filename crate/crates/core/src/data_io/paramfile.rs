//! Binary parameter-set files.
//!
//! ```text
//! fedsim-params 1\n
//! <layer count>\n
//! <name> <length>\n        (one line per layer, in order)
//! <values as little-endian f64, layer after layer>
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{Layer, ParamSet};

const MAGIC: &str = "fedsim-params 1";

pub fn encode_params(params: &ParamSet) -> Result<Vec<u8>> {
    let mut header = format!("{MAGIC}\n{}\n", params.layer_count());
    for layer in params.layers() {
        if layer.name.is_empty() || layer.name.chars().any(char::is_whitespace) {
            return Err(Error::usage(format!(
                "layer name {:?} cannot be stored (empty or contains whitespace)",
                layer.name
            )));
        }
        header.push_str(&format!("{} {}\n", layer.name, layer.values.len()));
    }
    let mut out = header.into_bytes();
    out.reserve(params.len() * 8);
    for layer in params.layers() {
        for v in &layer.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8], origin: &str) -> Result<ParamSet> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Result<String> {
        line_no += 1;
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(line_no, "unexpected end of header".into()))?;
        let text = std::str::from_utf8(&rest[..end]).map_err(|_| parse_err(line_no, "header is not UTF-8".into()))?;
        *pos += end + 1;
        Ok(text.to_string())
    };

    let magic = next_line(&mut pos)?;
    if magic != MAGIC {
        return Err(parse_err(1, format!("expected {MAGIC:?}, found {magic:?}")));
    }
    let count: usize = next_line(&mut pos)?
        .trim()
        .parse()
        .map_err(|e| parse_err(2, format!("layer count: {e}")))?;
    let mut shapes = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let line = next_line(&mut pos)?;
        let (name, len) = line
            .split_once(' ')
            .ok_or_else(|| parse_err(3 + i, format!("expected '<name> <length>', found {line:?}")))?;
        let len: usize = len
            .parse()
            .map_err(|e| parse_err(3 + i, format!("length of layer {name:?}: {e}")))?;
        shapes.push((name.to_string(), len));
    }

    let total: usize = shapes.iter().map(|(_, n)| n).sum();
    let body = &bytes[pos..];
    if body.len() != total * 8 {
        return Err(parse_err(
            count + 3,
            format!("expected {} bytes of values, found {}", total * 8, body.len()),
        ));
    }
    let mut chunks = body.chunks_exact(8);
    let layers = shapes
        .into_iter()
        .map(|(name, len)| {
            let values = chunks
                .by_ref()
                .take(len)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Layer::new(name, values)
        })
        .collect();
    ParamSet::new(layers).map_err(|e| parse_err(count + 3, e.to_string()))
}

pub fn write_params(path: &Path, params: &ParamSet) -> Result<()> {
    let bytes = encode_params(params)?;
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_params(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_params(&bytes, &path.display().to_string())
}
