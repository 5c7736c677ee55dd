//! `XMCK` checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "XMCK" | version u32
//! video_dim u32 | text_dim u32 | view count u32 | per view: name (u32 len + utf8), dim u32
//! network count u32 | per network: name (u32 len + utf8),
//!     layer count u32, per layer: rows u32, cols u32, rows*cols f64 weights, rows f64 biases
//! preprocessing block (tag u8 + payload)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{MultiViewModel, NetPair};
use crate::baselines::Preprocess;
use crate::corpus::View;
use crate::error::{Error, Result};
use crate::nn::EmbeddingNet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model together with the input transform it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MultiViewModel,
    pub preprocess: Preprocess,
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 256 {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "name too long"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

pub fn encode_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> std::io::Result<()> {
    let model = &ckpt.model;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(model.config().video_dim as u32)?;
    w.write_u32::<LittleEndian>(model.config().text_dim as u32)?;
    w.write_u32::<LittleEndian>(View::ALL.len() as u32)?;
    for view in View::ALL {
        write_str(w, view.name())?;
        w.write_u32::<LittleEndian>(model.view_dim(view) as u32)?;
    }
    let nets = model.networks();
    w.write_u32::<LittleEndian>(nets.len() as u32)?;
    for (name, net) in nets {
        write_str(w, name)?;
        net.write_to(w)?;
    }
    ckpt.preprocess.write_to(w)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_checkpoint(&mut w, ckpt).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn decode_checkpoint<R: Read>(r: &mut R, path: &Path) -> Result<Checkpoint> {
    let corrupt = |reason: String| Error::format("checkpoint", path, reason);
    let truncated = |e: std::io::Error| corrupt(format!("corrupt or truncated: {e}"));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            kind: "checkpoint",
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let video_dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let text_dim = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let view_count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if view_count != View::ALL.len() {
        return Err(corrupt(format!(
            "expected {} views, header lists {view_count}",
            View::ALL.len()
        )));
    }
    let mut view_dims = Vec::with_capacity(view_count);
    for view in View::ALL {
        let name = read_str(r).map_err(truncated)?;
        if name != view.name() {
            return Err(corrupt(format!("expected view `{}`, found `{name}`", view.name())));
        }
        view_dims.push(r.read_u32::<LittleEndian>().map_err(truncated)? as usize);
    }

    let net_count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if net_count != 4 && net_count != 6 {
        return Err(corrupt(format!("unexpected network count {net_count}")));
    }
    let mut nets: Vec<EmbeddingNet> = Vec::with_capacity(net_count);
    const NAMES: [&str; 6] = [
        "verb.video",
        "verb.text",
        "noun.video",
        "noun.text",
        "action.video",
        "action.text",
    ];
    for expected in &NAMES[..net_count] {
        let name = read_str(r).map_err(truncated)?;
        if name != *expected {
            return Err(corrupt(format!("expected network `{expected}`, found `{name}`")));
        }
        let net = EmbeddingNet::read_from(r)
            .map_err(truncated)?
            .map_err(|e| corrupt(e.to_string()))?;
        nets.push(net);
    }
    let preprocess = Preprocess::read_from(r)
        .map_err(truncated)?
        .map_err(|e| corrupt(e.to_string()))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(truncated)? != 0 {
        return Err(corrupt("trailing bytes".into()));
    }

    let mut it = nets.into_iter();
    let mut pair = || NetPair {
        video: it.next().expect("counted"),
        text: it.next().expect("counted"),
    };
    let verb = pair();
    let noun = pair();
    let head = (net_count == 6).then(pair);
    let model = MultiViewModel::from_parts(verb, noun, head).map_err(|e| corrupt(e.to_string()))?;
    if model.config().video_dim != video_dim || model.config().text_dim != text_dim {
        return Err(corrupt("header input dims disagree with networks".into()));
    }
    for (view, dim) in View::ALL.into_iter().zip(view_dims) {
        if model.view_dim(view) != dim {
            return Err(corrupt(format!(
                "header lists {view} dim {dim}, networks give {}",
                model.view_dim(view)
            )));
        }
    }
    Ok(Checkpoint { model, preprocess })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&mut BufReader::new(file), path)
}
