//! Workload specification: operation mix, key encoding, and validation.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use corodb_core::ExecMode;

pub const TABLE_NAME: &str = "ycsb_main";

/// Operation mix as fractions summing to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mix {
    pub read: f64,
    pub update: f64,
    pub rmw: f64,
    pub scan: f64,
    pub insert: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            read: 1.0,
            update: 0.0,
            rmw: 0.0,
            scan: 0.0,
            insert: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Read,
    Update,
    Rmw,
    Scan,
    Insert,
}

impl Mix {
    pub fn read_only(&self) -> bool {
        self.read == 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.read, self.update, self.rmw, self.scan, self.insert];
        if parts.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            bail!("mix fractions must be within [0, 1]");
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            bail!("mix fractions must sum to 1, got {sum}");
        }
        Ok(())
    }

    /// Maps a uniform draw in [0,1) to an operation.
    pub fn pick(&self, dice: f64) -> OpKind {
        let mut acc = self.read;
        if dice < acc {
            return OpKind::Read;
        }
        acc += self.update;
        if dice < acc {
            return OpKind::Update;
        }
        acc += self.rmw;
        if dice < acc {
            return OpKind::Rmw;
        }
        acc += self.scan;
        if dice < acc {
            return OpKind::Scan;
        }
        OpKind::Insert
    }
}

impl FromStr for Mix {
    type Err = anyhow::Error;

    /// Parses `read=0.8,rmw=0.2` style mixes.
    fn from_str(s: &str) -> Result<Mix> {
        let mut mix = Mix {
            read: 0.0,
            update: 0.0,
            rmw: 0.0,
            scan: 0.0,
            insert: 0.0,
        };
        for part in s.split(',') {
            let (name, frac) = part
                .split_once('=')
                .with_context(|| format!("mix component `{part}` is not name=fraction"))?;
            let frac: f64 = frac
                .parse()
                .with_context(|| format!("bad fraction in `{part}`"))?;
            match name.trim() {
                "read" => mix.read = frac,
                "update" => mix.update = frac,
                "rmw" => mix.rmw = frac,
                "scan" => mix.scan = frac,
                "insert" => mix.insert = frac,
                other => bail!("unknown mix component `{other}`"),
            }
        }
        mix.validate()?;
        Ok(mix)
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (name, v) in [
            ("read", self.read),
            ("update", self.update),
            ("rmw", self.rmw),
            ("scan", self.scan),
            ("insert", self.insert),
        ] {
            if v > 0.0 {
                if !first {
                    write!(f, ",")?;
                }
                write!(f, "{name}={v}")?;
                first = false;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccessApi {
    /// Conventional single-key interfaces; interleaving happens across
    /// transactions.
    Single,
    /// Reads within a transaction go through one multi-get call
    /// (intra-transaction interleaving).
    MultiGet,
}

impl FromStr for AccessApi {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<AccessApi> {
        match s {
            "single" => Ok(AccessApi::Single),
            "multi-get" => Ok(AccessApi::MultiGet),
            _ => bail!("api must be single|multi-get"),
        }
    }
}

impl fmt::Display for AccessApi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AccessApi::Single => "single",
            AccessApi::MultiGet => "multi-get",
        })
    }
}

#[derive(Clone, Debug)]
pub struct WorkloadSpec {
    pub records: u64,
    pub key_len: usize,
    pub val_len: usize,
    pub ops_per_txn: usize,
    pub mix: Mix,
    pub scan_len: usize,
    pub theta: f64,
    pub api: AccessApi,
    pub duration_secs: f64,
    pub workers: usize,
    pub mode: ExecMode,
    pub batch_size: usize,
    pub seed: u64,
    pub retry_aborts: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            records: 10_000_000,
            key_len: 8,
            val_len: 8,
            ops_per_txn: 10,
            mix: Mix::default(),
            scan_len: 10,
            theta: 0.0,
            api: AccessApi::Single,
            duration_secs: 30.0,
            workers: 1,
            mode: ExecMode::TwoLevel,
            batch_size: 8,
            seed: 42,
            retry_aborts: false,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        if !(0.0..1.0).contains(&self.theta) {
            bail!("theta must be in [0, 1)");
        }
        if self.records == 0 {
            bail!("records must be positive");
        }
        if self.key_len == 0 || self.key_len > 1024 {
            bail!("key length must be in 1..=1024");
        }
        // Generated keys leave headroom above the loaded range for inserts.
        let addressable = if self.key_len >= 8 {
            u64::MAX
        } else {
            (1u64 << (8 * self.key_len)) - 1
        };
        if self.records > addressable / 2 {
            bail!("records do not fit the key length (inserts need headroom)");
        }
        if self.ops_per_txn == 0 {
            bail!("ops-per-txn must be positive");
        }
        if self.scan_len == 0 {
            bail!("scan-len must be positive");
        }
        if self.workers == 0 || self.workers > 1 << 14 {
            bail!("workers must be in 1..=16384");
        }
        if self.batch_size == 0 {
            bail!("batch-size must be positive");
        }
        Ok(())
    }
}

/// Encodes a numeric key index into `key_len` bytes, big-endian in the
/// tail so lexicographic order equals numeric order at any width.
pub fn encode_key(idx: u64, key_len: usize, out: &mut Vec<u8>) {
    out.clear();
    out.resize(key_len, 0);
    let be = idx.to_be_bytes();
    let n = key_len.min(8);
    out[key_len - n..].copy_from_slice(&be[8 - n..]);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix_parses_and_validates() {
        let m: Mix = "read=0.8,rmw=0.2".parse().unwrap();
        assert_eq!(
            m,
            Mix {
                read: 0.8,
                update: 0.0,
                rmw: 0.2,
                scan: 0.0,
                insert: 0.0
            }
        );
        assert!("read=0.5".parse::<Mix>().is_err(), "must sum to 1");
        assert!("blah=1.0".parse::<Mix>().is_err());
        assert_eq!(format!("{m}"), "read=0.8,rmw=0.2");
    }

    #[test]
    fn mix_pick_covers_all_ops() {
        let m: Mix = "read=0.2,update=0.2,rmw=0.2,scan=0.2,insert=0.2"
            .parse()
            .unwrap();
        assert_eq!(m.pick(0.1), OpKind::Read);
        assert_eq!(m.pick(0.3), OpKind::Update);
        assert_eq!(m.pick(0.5), OpKind::Rmw);
        assert_eq!(m.pick(0.7), OpKind::Scan);
        assert_eq!(m.pick(0.9), OpKind::Insert);
    }

    #[test]
    fn key_encoding_preserves_order_at_any_width() {
        for len in [8usize, 12, 16, 64] {
            let mut a = Vec::new();
            let mut b = Vec::new();
            encode_key(1000, len, &mut a);
            encode_key(1001, len, &mut b);
            assert!(a < b);
            assert_eq!(a.len(), len);
        }
        let mut small = Vec::new();
        encode_key(300, 2, &mut small);
        assert_eq!(small, vec![1, 44]);
    }

    #[test]
    fn spec_validation_catches_bad_configs() {
        let ok = WorkloadSpec {
            records: 1000,
            ..Default::default()
        };
        ok.validate().unwrap();
        assert!(WorkloadSpec {
            theta: 1.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(WorkloadSpec {
            records: 0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(WorkloadSpec {
            records: 200,
            key_len: 1,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(WorkloadSpec {
            batch_size: 0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        let bad_mix = Mix {
            read: 0.5,
            update: 0.0,
            rmw: 0.0,
            scan: 0.0,
            insert: 0.0,
        };
        assert!(WorkloadSpec { mix: bad_mix, ..ok }.validate().is_err());
    }
}
