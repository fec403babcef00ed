//! Text snapshots of a population field.
//!
//! ```text
//! # slfv-snapshot time=125 grid_len=101 u=0.04 mu=0.0001 radius=4 n_max=21.2625 boundary=clip dim=1 capacity=2000
//! site,type,mass
//! 0,UNIFORM,2.9999999999999996e0
//! 0,17,1.0000000000000000e-2
//! ```
//!
//! Masses are written with 17 significant digits, which round-trips every
//! `f64` exactly. Each site lists its uniform pool first, then explicit types
//! in increasing id order.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use crate::error::FormatError;
use crate::field::{PopulationField, TypeId};
use crate::model::{Boundary, ModelParams};

pub const SNAPSHOT_MAGIC: &str = "# slfv-snapshot";
pub const UNIFORM_TAG: &str = "UNIFORM";

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub params: ModelParams,
    pub field: PopulationField,
}

/// Formats `v` with 17 significant digits.
pub fn fmt_exact(v: f64) -> String {
    format!("{v:.16e}")
}

fn boundary_name(b: Boundary) -> &'static str {
    match b {
        Boundary::Clip => "clip",
        Boundary::Wrap => "wrap",
    }
}

pub fn write_snapshot<W: Write>(
    mut w: W,
    time: f64,
    params: &ModelParams,
    field: &PopulationField,
) -> std::io::Result<()> {
    writeln!(
        w,
        "{SNAPSHOT_MAGIC} time={} grid_len={} u={} mu={} radius={} n_max={} boundary={} dim={} capacity={}",
        fmt_exact(time),
        params.grid_len,
        fmt_exact(params.u),
        fmt_exact(params.mu),
        params.radius,
        fmt_exact(params.n_max),
        boundary_name(params.boundary),
        params.dim,
        field.ledger().capacity(),
    )?;
    writeln!(w, "site,type,mass")?;
    for x in 0..field.len() {
        writeln!(w, "{x},{UNIFORM_TAG},{}", fmt_exact(field.uniform_mass(x)))?;
        let mut types: Vec<(TypeId, f64)> = field.types_at(x).collect();
        types.sort_by_key(|t| t.0);
        for (id, m) in types {
            writeln!(w, "{x},{id},{}", fmt_exact(m))?;
        }
    }
    Ok(())
}

fn parse_err(line: usize, msg: impl Into<String>) -> FormatError {
    FormatError::Parse {
        line,
        msg: msg.into(),
    }
}

pub fn read_snapshot<R: BufRead>(r: R) -> Result<Snapshot, FormatError> {
    let mut lines = r.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty snapshot"))?;
    let header = header?;
    let rest = header
        .strip_prefix(SNAPSHOT_MAGIC)
        .ok_or_else(|| parse_err(1, "missing snapshot header"))?;
    let kv: BTreeMap<&str, &str> = rest
        .split_whitespace()
        .filter_map(|tok| tok.split_once('='))
        .collect();
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| parse_err(1, format!("header lacks {k}")));
    let num = |k: &str| -> Result<f64, FormatError> {
        get(k)?.parse().map_err(|_| parse_err(1, format!("bad {k}")))
    };
    let int = |k: &str| -> Result<usize, FormatError> {
        get(k)?.parse().map_err(|_| parse_err(1, format!("bad {k}")))
    };
    let boundary = match get("boundary")? {
        "clip" => Boundary::Clip,
        "wrap" => Boundary::Wrap,
        other => return Err(parse_err(1, format!("unknown boundary {other}"))),
    };
    let params = ModelParams {
        u: num("u")?,
        mu: num("mu")?,
        radius: int("radius")?,
        n_max: num("n_max")?,
        grid_len: int("grid_len")?,
        boundary,
        dim: int("dim")? as u32,
    };
    let time = num("time")?;
    let capacity = int("capacity")?;
    let mut field = PopulationField::uniform(params.grid_len, 0.0, capacity);
    match lines.next() {
        Some((_, Ok(l))) if l.trim() == "site,type,mass" => {}
        _ => return Err(parse_err(2, "missing column header")),
    }
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.split(',');
        let (Some(site), Some(ty), Some(mass), None) = (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            return Err(parse_err(lineno, "expected site,type,mass"));
        };
        let site: usize = site.trim().parse().map_err(|_| parse_err(lineno, "bad site"))?;
        if site >= params.grid_len {
            return Err(parse_err(lineno, "site out of range"));
        }
        let mass: f64 = mass.trim().parse().map_err(|_| parse_err(lineno, "bad mass"))?;
        if !(mass >= 0.0) {
            return Err(parse_err(lineno, "negative mass"));
        }
        match ty.trim() {
            UNIFORM_TAG => field.set_uniform_mass(site, mass),
            id => {
                let id: TypeId = id.parse().map_err(|_| parse_err(lineno, "bad type id"))?;
                if id as usize >= capacity {
                    return Err(parse_err(lineno, "type id beyond capacity"));
                }
                field.set_type_mass(site, id, mass);
            }
        }
    }
    for x in 0..field.len() {
        field.set_last_touch(x, time);
    }
    Ok(Snapshot {
        time,
        params,
        field,
    })
}
