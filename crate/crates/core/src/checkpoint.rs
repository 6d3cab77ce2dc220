//! Model checkpoints: header (label space, ablation, geometry, seed) followed
//! by named parameter tensors in registration order.

use std::path::Path;

use crate::codec::{self, Dec, Enc};
use crate::dataset::{decode_space, encode_space};
use crate::error::{Error, Result};
use crate::model::{AblationConfig, Head, InputGeometry, LabelSpace, Model};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SANC";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let mut e = Enc::default();
    encode_space(&mut e, &model.space);
    e.u8(model.ablation.to_bits());
    let g = &model.geometry;
    for v in [g.frame_h, g.frame_w, g.crop_h, g.crop_w, g.hidden] {
        e.u32(v as u32);
    }
    e.u64(model.seed);
    let entries = model.params.entries();
    e.usize(entries.len());
    for p in entries {
        e.str(&p.name);
        e.u32(p.tensor.rank() as u32);
        for &d in p.tensor.shape() {
            e.u32(d as u32);
        }
        e.f32s(p.tensor.data());
    }
    codec::seal(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &e.buf)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    codec::write_atomic(path, &to_bytes(model))
}

/// Loads a checkpoint. When `expected` is given, every head width must match
/// it; a mismatch is a geometry error naming the head.
pub fn load(path: &Path, expected: Option<&LabelSpace>) -> Result<Model<f32>> {
    let bytes = std::fs::read(path)?;
    from_bytes(path, &bytes, expected)
}

pub fn from_bytes(path: &Path, bytes: &[u8], expected: Option<&LabelSpace>) -> Result<Model<f32>> {
    let body = codec::unseal(path, bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let mut d = Dec::new(body, path);
    let space = decode_space(&mut d)?;
    if let Some(exp) = expected {
        for head in Head::ALL {
            if space.width(head) != exp.width(head) {
                return Err(Error::geometry(
                    "checkpoint load",
                    format!(
                        "head {} has {} classes in the checkpoint, {} expected",
                        head.name(),
                        space.width(head),
                        exp.width(head)
                    ),
                ));
            }
        }
        if space.has_z != exp.has_z {
            return Err(Error::geometry("checkpoint load", "head z presence differs from the expected label space"));
        }
    }
    let bits = d.u8("ablation")?;
    if bits > 0b1111 {
        return Err(d.err(format!("invalid ablation bits {bits:#x}")));
    }
    let ablation = AblationConfig::from_bits(bits);
    let mut g = [0usize; 5];
    for v in g.iter_mut() {
        *v = d.u32("geometry")? as usize;
    }
    let geometry = InputGeometry {
        frame_h: g[0],
        frame_w: g[1],
        crop_h: g[2],
        crop_w: g[3],
        hidden: g[4],
    };
    if geometry.frame_h * geometry.frame_w > 1 << 24 || geometry.hidden > 1 << 16 {
        return Err(d.err(format!("implausible geometry {geometry:?}")));
    }
    let seed = d.u64("seed")?;
    let mut model = Model::<f32>::build(space, geometry, ablation, seed).map_err(|e| d.err(format!("rebuilding the model: {e}")))?;
    let n = d.len("parameter count", 16)?;
    let mut seen = vec![false; model.params.len()];
    for _ in 0..n {
        let name = d.str("parameter name")?;
        let rank = d.u32("rank")? as usize;
        if rank > 8 {
            return Err(d.err(format!("{name}: rank {rank} too large")));
        }
        let shape = (0..rank).map(|_| d.u32("shape").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let data = d.f32s("parameter data")?;
        let id = model.params.find(&name).ok_or_else(|| d.err(format!("unexpected parameter {name}")))?;
        let slot = model.params.get_mut(id);
        if slot.shape() != shape.as_slice() {
            return Err(Error::geometry(
                "checkpoint load",
                format!("parameter {name}: stored shape {shape:?}, model expects {:?}", slot.shape()),
            ));
        }
        *slot = Tensor::new(shape, data).map_err(|e| d.err(format!("{name}: {e}")))?;
        seen[id.0] = true;
    }
    d.finish()?;
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::MissingParameter(model.params.entries()[i].name.clone()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini() -> Model<f32> {
        let g = InputGeometry {
            frame_h: 24,
            frame_w: 32,
            crop_h: 10,
            crop_w: 15,
            hidden: 8,
        };
        Model::build(LabelSpace::patrol(), g, AblationConfig::default(), 3).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let m = mini();
        let b = to_bytes(&m);
        let back = from_bytes(Path::new("m"), &b, Some(&LabelSpace::patrol())).unwrap();
        assert_eq!(to_bytes(&back), b);
    }

    #[test]
    fn label_space_mismatch_names_head() {
        let b = to_bytes(&mini());
        let other = LabelSpace {
            n_x: 12,
            ..LabelSpace::patrol()
        };
        let err = from_bytes(Path::new("m"), &b, Some(&other)).unwrap_err();
        assert!(matches!(err, Error::Geometry { .. }));
        assert!(err.to_string().contains("head x"), "{err}");
    }
}
