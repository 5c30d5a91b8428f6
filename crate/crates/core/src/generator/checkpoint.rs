use std::path::Path;

use super::{Generator, GeneratorConfig, OutputKind};
use crate::error::{Error, Result};
use crate::io::{Container, TensorFile};

/// Architecture header followed by one named tensor per parameter group.
pub fn checkpoint_container(g: &Generator) -> Result<Container> {
    let cfg = g.config();
    let mut arch = vec![
        cfg.size as f64,
        cfg.d_lat as f64,
        match cfg.output {
            OutputKind::Magnitude => 0.0,
            OutputKind::Phase => 1.0,
        },
        cfg.blocks() as f64,
    ];
    arch.extend(cfg.channels.iter().map(|&c| c as f64));
    let mut c = Container::new();
    c.insert("arch", TensorFile::real(vec![arch.len()], arch)?);
    for (name, off, dims) in &g.layout().entries {
        let len: usize = dims.iter().product();
        c.insert(name, TensorFile::real(dims.clone(), g.params()[*off..off + len].to_vec())?);
    }
    Ok(c)
}

pub fn from_container(c: &Container) -> Result<Generator> {
    let arch = c.get("arch")?.as_real()?;
    let bad = || Error::Format("malformed generator architecture header".into());
    if arch.len() < 4 {
        return Err(bad());
    }
    let as_usize = |v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
            Ok(v as usize)
        } else {
            Err(bad())
        }
    };
    let blocks = as_usize(arch[3])?;
    if arch.len() != 4 + blocks {
        return Err(bad());
    }
    let config = GeneratorConfig {
        size: as_usize(arch[0])?,
        d_lat: as_usize(arch[1])?,
        output: match arch[2] {
            0.0 => OutputKind::Magnitude,
            1.0 => OutputKind::Phase,
            _ => return Err(bad()),
        },
        channels: arch[4..].iter().map(|&v| as_usize(v)).collect::<Result<_>>()?,
    };
    config.validate()?;
    let probe = Generator::from_params(config.clone(), vec![0.0; super::Layout::new(&config).total()])?;
    let mut params = vec![0.0; probe.params().len()];
    for (name, off, dims) in &probe.layout().entries {
        let t = c.get(name)?;
        t.expect_dims(dims)?;
        params[*off..off + t.as_real()?.len()].copy_from_slice(t.as_real()?);
    }
    Generator::from_params(config, params)
}

pub fn save_checkpoint(g: &Generator, path: &Path) -> Result<()> {
    checkpoint_container(g)?.write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Generator> {
    from_container(&Container::read(path)?)
}
