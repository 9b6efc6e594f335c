//! Binary checkpoint format.
//!
//! Layout, all integers and reals little-endian:
//!
//! | field        | encoding                                                   |
//! |--------------|------------------------------------------------------------|
//! | magic        | `b"ADBM"`                                                  |
//! | version      | u16                                                        |
//! | config       | num_blocks u32, channels u32, scale u32, scope u8, b_base u32, frozen u8 |
//! | weights      | count u32, then f32 values: per conv weight then bias      |
//! | quant params | present u8; if 1: K u32, then per layer lower f32, upper f32, bound f32, base_bits u8, adaptive u8 |
//! | mapper       | present u8; if 1: i2b lower/upper f32, l2b lower/upper f32, magnitude u32, K u32, K carriers f32 |
//! | crc          | CRC-32 (IEEE) of every preceding byte, u32                 |

use std::path::Path;

use crate::bitmapping::{BitMapper, I2BMapper, L2BMapper};
use crate::error::{Error, Result};
use crate::quantizer::{ActQuant, BitValue, WgtQuant};
use crate::srnet::{QuantParams, QuantScope, QuantState, SrNetConfig, SrNetwork};

pub const MAGIC: &[u8; 4] = b"ADBM";
pub const VERSION: u16 = 1;

fn ck(field: &'static str, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        field,
        msg: msg.into(),
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("checkpoint section exceeds u32 range"));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(ck(field, "truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }
    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, field)?.try_into().expect("2 bytes"),
        ))
    }
    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, field)?.try_into().expect("4 bytes"),
        ))
    }
    fn f32(&mut self, field: &'static str) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4, field)?.try_into().expect("4 bytes"),
        ))
    }
    fn flag(&mut self, field: &'static str) -> Result<bool> {
        match self.u8(field)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(ck(field, format!("expected 0 or 1, found {v}"))),
        }
    }
}

/// Serialize a network with its quantizer state.
pub fn encode(net: &SrNetwork) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION);
    let c = net.config;
    w.len32(c.num_blocks);
    w.len32(c.channels);
    w.len32(c.scale);
    w.u8(c.scope.code());
    w.u32(c.b_base);
    w.u8(net.frozen as u8);

    let count: usize = net
        .convs
        .iter()
        .map(|l| l.weight.numel() + l.bias.numel())
        .sum();
    w.len32(count);
    for l in &net.convs {
        for v in l.weight.data().iter().chain(l.bias.data()) {
            w.f32(*v);
        }
    }

    match &net.quant {
        None => {
            w.u8(0);
            w.u8(0);
        }
        Some(st) => {
            w.u8(1);
            w.len32(st.params.len());
            for p in &st.params {
                w.f32(p.act.lower);
                w.f32(p.act.upper);
                w.f32(p.wgt.bound);
                w.u8(p.base_bits as u8);
                w.u8(p.adaptive as u8);
            }
            w.u8(1);
            let m = &st.mapper;
            w.f32(m.i2b.lower);
            w.f32(m.i2b.upper);
            w.f32(m.l2b.lower);
            w.f32(m.l2b.upper);
            w.u32(m.magnitude);
            w.len32(m.l2b.factors.len());
            for f in &m.l2b.factors {
                w.f32(f.cont);
            }
        }
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

/// Parse a checkpoint, validating magic, version, checksum and structure.
pub fn decode(bytes: &[u8]) -> Result<SrNetwork> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ck("magic", "expected \"ADBM\""));
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(ck(
            "version",
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    if bytes.len() < 10 {
        return Err(ck("crc", "truncated"));
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body_len]) != stored {
        return Err(ck("crc", "checksum mismatch (file corrupted or truncated)"));
    }
    let mut r = Reader {
        buf: &bytes[..body_len],
        pos: r.pos,
    };

    let num_blocks = r.u32("config.num_blocks")? as usize;
    let channels = r.u32("config.channels")? as usize;
    let scale = r.u32("config.scale")? as usize;
    let scope_code = r.u8("config.scope")?;
    let scope = QuantScope::from_code(scope_code)
        .ok_or_else(|| ck("config.scope", format!("unknown code {scope_code}")))?;
    let b_base = r.u32("config.b_base")?;
    let frozen = r.flag("config.frozen")?;
    let config = SrNetConfig {
        num_blocks,
        channels,
        scale,
        scope,
        b_base,
    };
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(ck("config", errs.join("; ")));
    }
    let mut net = SrNetwork::new(config, 0)?;
    net.frozen = frozen;

    let count = r.u32("weights.count")? as usize;
    let expected: usize = net
        .convs
        .iter()
        .map(|l| l.weight.numel() + l.bias.numel())
        .sum();
    if count != expected {
        return Err(ck(
            "weights.count",
            format!("{count} values for a network with {expected}"),
        ));
    }
    for l in &mut net.convs {
        for v in l.weight.data_mut() {
            *v = r.f32("weights")?;
        }
        for v in l.bias.data_mut() {
            *v = r.f32("weights")?;
        }
    }

    let has_params = r.flag("quant_params.present")?;
    let params = if has_params {
        let k = r.u32("quant_params.count")? as usize;
        if k != net.num_quantized() {
            return Err(ck(
                "quant_params.count",
                format!("{k} entries for {} quantized layers", net.num_quantized()),
            ));
        }
        let mut params = Vec::with_capacity(k);
        for _ in 0..k {
            let lower = r.f32("quant_params.lower")?;
            let upper = r.f32("quant_params.upper")?;
            let bound = r.f32("quant_params.bound")?;
            let base_bits = r.u8("quant_params.base_bits")? as u32;
            let adaptive = r.flag("quant_params.adaptive")?;
            params.push(QuantParams {
                act: ActQuant { lower, upper },
                wgt: WgtQuant { bound },
                base_bits,
                adaptive,
            });
        }
        Some(params)
    } else {
        None
    };

    let has_mapper = r.flag("mapper.present")?;
    if has_mapper != has_params {
        return Err(ck(
            "mapper.present",
            "mapper and quantizer blocks must appear together",
        ));
    }
    if let Some(params) = params {
        let i2b = I2BMapper {
            lower: r.f32("mapper.i2b_lower")?,
            upper: r.f32("mapper.i2b_upper")?,
        };
        let l_lower = r.f32("mapper.l2b_lower")?;
        let l_upper = r.f32("mapper.l2b_upper")?;
        let magnitude = r.u32("mapper.magnitude")?;
        let k = r.u32("mapper.factor_count")? as usize;
        if k != params.len() {
            return Err(ck(
                "mapper.factor_count",
                format!("{k} factors for {} quantized layers", params.len()),
            ));
        }
        let factors = (0..k)
            .map(|_| r.f32("mapper.factors").map(BitValue::new))
            .collect::<Result<Vec<_>>>()?;
        net.quant = Some(QuantState {
            params,
            mapper: BitMapper {
                i2b,
                l2b: L2BMapper {
                    lower: l_lower,
                    upper: l_upper,
                    factors,
                },
                magnitude,
            },
        });
    }
    if r.pos != r.buf.len() {
        return Err(ck(
            "crc",
            format!("{} unexpected trailing bytes", r.buf.len() - r.pos),
        ));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &SrNetwork, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|e| crate::error::io_at(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SrNetwork> {
    decode(&std::fs::read(path).map_err(|e| crate::error::io_at(path, e))?)
}

/// Load and check that the stored network matches `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &SrNetConfig) -> Result<SrNetwork> {
    let net = load_checkpoint(path)?;
    if net.config.scope != expected.scope {
        return Err(Error::ScopeMismatch {
            found: net.config.scope.name().to_string(),
            expected: expected.scope.name().to_string(),
        });
    }
    let c = net.config;
    let mut errs = Vec::new();
    for (name, got, want) in [
        ("network.num_blocks", c.num_blocks, expected.num_blocks),
        ("network.channels", c.channels, expected.channels),
        ("network.scale", c.scale, expected.scale),
        (
            "network.b_base",
            c.b_base as usize,
            expected.b_base as usize,
        ),
    ] {
        if got != want {
            errs.push(format!("{name}: checkpoint has {got}, config has {want}"));
        }
    }
    if errs.is_empty() {
        Ok(net)
    } else {
        Err(Error::Config(errs))
    }
}
