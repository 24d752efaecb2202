//! `OFAKWS01` checkpoint: version, config block with its hash, stage marker,
//! then tensor records `(layer id u16, role u8, rank u8, dims u32…, f32
//! payload)` and a CRC32 trailer. Teacher records set the high role bit.

use std::collections::BTreeMap;
use std::path::Path;

use super::{build_supernet, BatchNorm, Network, Stage, Supernet, SupernetConfig};
use crate::binio::{config_hash, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OFAKWS01";
const VERSION: u16 = 1;
const KIND: &str = "supernet checkpoint";

const ROLE_WEIGHT: u8 = 0;
const ROLE_BIAS: u8 = 1;
const ROLE_GAMMA: u8 = 2;
const ROLE_BETA: u8 = 3;
const ROLE_MEAN: u8 = 4;
const ROLE_VAR: u8 = 5;
const ROLE_ORDER: u8 = 6;
const TEACHER: u8 = 0x80;

fn write_config(w: &mut Writer, c: &SupernetConfig) -> Result<()> {
    w.u64(config_hash(c));
    w.small(c.unit_max_depths.len(), "unit count")?;
    for &d in &c.unit_max_depths {
        w.small(d, "unit depth")?;
    }
    w.small(c.max_width, "max width")?;
    w.small(c.max_kernel, "max kernel")?;
    w.small(c.kernel_choices.len(), "kernel choice count")?;
    for &k in &c.kernel_choices {
        w.small(k, "kernel choice")?;
    }
    w.small(c.width_choices.len(), "width choice count")?;
    for &v in &c.width_choices {
        w.small(v, "width choice")?;
    }
    w.small(c.n_classes, "class count")?;
    w.small(c.input_channels, "input channels")?;
    w.small(c.input_len, "input length")
}

fn read_list(r: &mut Reader) -> Result<Vec<usize>> {
    let n = r.u16()? as usize;
    (0..n).map(|_| r.u16().map(usize::from)).collect()
}

fn read_config(r: &mut Reader) -> Result<SupernetConfig> {
    let hash = r.u64()?;
    let unit_max_depths = read_list(r)?;
    let max_width = r.u16()? as usize;
    let max_kernel = r.u16()? as usize;
    let kernel_choices = read_list(r)?;
    let width_choices = read_list(r)?;
    let c = SupernetConfig {
        unit_max_depths,
        max_width,
        max_kernel,
        kernel_choices,
        width_choices,
        n_classes: r.u16()? as usize,
        input_channels: r.u16()? as usize,
        input_len: r.u16()? as usize,
    };
    if config_hash(&c) != hash {
        return Err(r.err("config hash does not match config block"));
    }
    c.validate()?;
    Ok(c)
}

fn record(w: &mut Writer, layer: usize, role: u8, shape: &[usize], data: &[f32]) -> Result<()> {
    w.small(layer, "layer id")?;
    w.u8(role);
    w.u8(shape.len() as u8);
    for &d in shape {
        w.u32(d as u32);
    }
    w.f32s(data);
    Ok(())
}

fn network_records(w: &mut Writer, net: &Network, flag: u8) -> Result<usize> {
    let mut n = 0;
    for (id, l) in net.units.iter().flatten().enumerate() {
        record(w, id, ROLE_WEIGHT | flag, l.weight.shape(), l.weight.data())?;
        record(w, id, ROLE_BIAS | flag, l.bias.shape(), l.bias.data())?;
        n += 2;
        if let Some(bn) = &l.bn {
            let c = bn.running_mean.len();
            record(w, id, ROLE_GAMMA | flag, bn.gamma.shape(), bn.gamma.data())?;
            record(w, id, ROLE_BETA | flag, bn.beta.shape(), bn.beta.data())?;
            record(w, id, ROLE_MEAN | flag, &[c], &bn.running_mean)?;
            record(w, id, ROLE_VAR | flag, &[c], &bn.running_var)?;
            n += 4;
        }
    }
    let head = net.units.iter().map(Vec::len).sum::<usize>();
    record(
        w,
        head,
        ROLE_WEIGHT | flag,
        net.head.weight.shape(),
        net.head.weight.data(),
    )?;
    record(
        w,
        head,
        ROLE_BIAS | flag,
        net.head.bias.shape(),
        net.head.bias.data(),
    )?;
    Ok(n + 2)
}

pub fn write_checkpoint(sn: &Supernet) -> Result<Vec<u8>> {
    let mut body = Writer::default();
    let mut count = network_records(&mut body, &sn.net, 0)?;
    for (id, order) in sn.channel_order.iter().enumerate() {
        let as_f32: Vec<f32> = order.iter().map(|&i| i as f32).collect();
        record(&mut body, id, ROLE_ORDER, &[order.len()], &as_f32)?;
        count += 1;
    }
    if let Some(t) = &sn.teacher {
        count += network_records(&mut body, t, TEACHER)?;
    }
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(VERSION);
    write_config(&mut w, &sn.config)?;
    w.u8(sn.stage.code());
    w.u8(sn.teacher.is_some() as u8);
    w.u32(count as u32);
    w.bytes(&body.buf);
    Ok(w.finish())
}

type Records = BTreeMap<(u16, u8), (Vec<usize>, Vec<f32>)>;

fn fill_network(net: &mut Network, recs: &mut Records, flag: u8) -> Result<()> {
    let mut take = |id: usize, role: u8, shape: &[usize]| -> Result<Vec<f32>> {
        let (s, d) = recs.remove(&(id as u16, role | flag)).ok_or_else(|| {
            Error::format(
                KIND,
                format!("missing record layer {id} role {}", role | flag),
            )
        })?;
        if s != shape {
            return Err(Error::format(
                KIND,
                format!("layer {id} role {role}: shape {s:?}, expected {shape:?}"),
            ));
        }
        Ok(d)
    };
    let set = |t: &mut Tensor, d: Vec<f32>| t.data_mut().copy_from_slice(&d);
    let n_layers: usize = net.units.iter().map(Vec::len).sum();
    for (id, l) in net.units.iter_mut().flatten().enumerate() {
        let d = take(id, ROLE_WEIGHT, l.weight.shape())?;
        set(&mut l.weight, d);
        let d = take(id, ROLE_BIAS, l.bias.shape())?;
        set(&mut l.bias, d);
        if let Some(BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        }) = &mut l.bn
        {
            let c = running_mean.len();
            set(gamma, take(id, ROLE_GAMMA, &[c])?);
            set(beta, take(id, ROLE_BETA, &[c])?);
            *running_mean = take(id, ROLE_MEAN, &[c])?;
            *running_var = take(id, ROLE_VAR, &[c])?;
        }
    }
    let d = take(n_layers, ROLE_WEIGHT, net.head.weight.shape())?;
    set(&mut net.head.weight, d);
    let d = take(n_layers, ROLE_BIAS, net.head.bias.shape())?;
    set(&mut net.head.bias, d);
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Supernet> {
    let mut r = Reader::open(bytes, CHECKPOINT_MAGIC, KIND)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let config = read_config(&mut r)?;
    let stage = Stage::from_code(r.u8()?).ok_or_else(|| r.err("bad stage marker"))?;
    let has_teacher = r.u8()? != 0;
    let count = r.u32()? as usize;
    let mut recs = Records::new();
    for _ in 0..count {
        let id = r.u16()?;
        let role = r.u8()?;
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let n = shape.iter().product();
        let data = r.f32s(n)?;
        if recs.insert((id, role), (shape, data)).is_some() {
            return Err(r.err(format!("duplicate record layer {id} role {role}")));
        }
    }
    r.done()?;
    let mut sn = build_supernet(&config, 0)?;
    sn.stage = stage;
    fill_network(&mut sn.net, &mut recs, 0)?;
    for (id, order) in sn.channel_order.iter_mut().enumerate() {
        let (s, d) = recs
            .remove(&(id as u16, ROLE_ORDER))
            .ok_or_else(|| Error::format(KIND, format!("missing channel order for layer {id}")))?;
        if s != [order.len()] {
            return Err(Error::format(KIND, "channel order length mismatch"));
        }
        *order = d.iter().map(|&v| v as usize).collect();
    }
    if has_teacher {
        let mut t = sn.net.clone();
        fill_network(&mut t, &mut recs, TEACHER)?;
        sn.teacher = Some(t);
    }
    if !recs.is_empty() {
        return Err(Error::format(
            KIND,
            format!("{} unexpected records", recs.len()),
        ));
    }
    Ok(sn)
}

pub fn save_checkpoint(sn: &Supernet, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(sn)?).map_err(Error::at_path(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Supernet> {
    read_checkpoint(&std::fs::read(path).map_err(Error::at_path(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SupernetConfig {
        SupernetConfig {
            unit_max_depths: vec![1, 2],
            max_width: 4,
            max_kernel: 3,
            kernel_choices: vec![1, 3],
            width_choices: vec![2, 4],
            n_classes: 2,
            input_channels: 3,
            input_len: 8,
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let mut sn = build_supernet(&tiny(), 9).unwrap();
        sn.stage = Stage::ElasticDepth;
        sn.teacher = Some(build_supernet(&tiny(), 10).unwrap().net);
        sn.channel_order[1] = vec![3, 1, 0, 2];
        sn.net.units[0][0].bn.as_mut().unwrap().running_var[2] = 0.25;
        let bytes = write_checkpoint(&sn).unwrap();
        assert_eq!(&bytes[..8], b"OFAKWS01");
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, sn);
        assert_eq!(write_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let sn = build_supernet(&tiny(), 1).unwrap();
        let mut bytes = write_checkpoint(&sn).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(read_checkpoint(&bytes).is_err());
        assert!(read_checkpoint(&bytes[..20]).is_err());
    }
}
