//! `HITGEO-DS` dataset files.
//!
//! Binary layout (little endian):
//!
//! ```text
//! magic      9 bytes  "HITGEO-DS"
//! version    u32
//! fingerprint u64
//! seed       u64
//! n_traj     u64
//! counts     u64 x n_traj      states per trajectory
//! states     u32 x sum(counts)
//! actions    u32 x sum(counts - 1)
//! ```
//!
//! The text variant (`.txt`) stores the same fields one per line:
//! `HITGEO-DS <version>`, `fingerprint <hex>`, `seed <n>`, `trajectories <n>`,
//! `counts ...`, `states ...`, `actions ...`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Dataset, Trajectory};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 9] = b"HITGEO-DS";
const VERSION: u32 = 1;

fn is_text(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("txt"))
}

impl Dataset {
    /// Write to `path`; a `.txt` extension selects the text layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        if is_text(path) {
            self.write_text(&mut w)?;
        } else {
            self.write_binary(&mut w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        if is_text(path) {
            Self::read_text(&mut r)
        } else {
            Self::read_binary(&mut r)
        }
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.env_fingerprint)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u64::<LittleEndian>(self.trajectories.len() as u64)?;
        for t in &self.trajectories {
            w.write_u64::<LittleEndian>(t.states.len() as u64)?;
        }
        for t in &self.trajectories {
            for &s in &t.states {
                w.write_u32::<LittleEndian>(to_u32(s)?)?;
            }
        }
        for t in &self.trajectories {
            for &a in &t.actions {
                w.write_u32::<LittleEndian>(to_u32(a)?)?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 9];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let fingerprint = r.read_u64::<LittleEndian>()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut counts = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let c = r.read_u64::<LittleEndian>()? as usize;
            if c == 0 {
                return Err(Error::Format("trajectory without states".into()));
            }
            counts.push(c);
        }
        let mut trajectories: Vec<Trajectory> = Vec::with_capacity(n);
        for &c in &counts {
            let mut states = Vec::with_capacity(c);
            for _ in 0..c {
                states.push(r.read_u32::<LittleEndian>()? as usize);
            }
            trajectories.push(Trajectory {
                states,
                actions: Vec::with_capacity(c - 1),
            });
        }
        for t in &mut trajectories {
            for _ in 0..t.states.len() - 1 {
                t.actions.push(r.read_u32::<LittleEndian>()? as usize);
            }
        }
        Dataset::new(trajectories, fingerprint, seed)
    }

    pub fn write_text<W: Write>(&self, w: &mut W) -> Result<()> {
        let join = |it: &mut dyn Iterator<Item = usize>| {
            it.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
        };
        writeln!(w, "HITGEO-DS {VERSION}")?;
        writeln!(w, "fingerprint {:016x}", self.env_fingerprint)?;
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "trajectories {}", self.trajectories.len())?;
        writeln!(
            w,
            "counts {}",
            join(&mut self.trajectories.iter().map(|t| t.states.len()))
        )?;
        writeln!(
            w,
            "states {}",
            join(
                &mut self
                    .trajectories
                    .iter()
                    .flat_map(|t| t.states.iter().copied())
            )
        )?;
        writeln!(
            w,
            "actions {}",
            join(
                &mut self
                    .trajectories
                    .iter()
                    .flat_map(|t| t.actions.iter().copied())
            )
        )?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                lines.push(line);
            }
        }
        let field = |i: usize, key: &str| -> Result<&str> {
            let line = lines
                .get(i)
                .ok_or_else(|| Error::Format(format!("missing `{key}` line")))?;
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| Error::Format(format!("expected `{key}`, got `{line}`")))?;
            Ok(rest.trim())
        };
        let ints = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|e| Error::Format(format!("`{t}`: {e}")))
                })
                .collect()
        };
        let version: u32 = field(0, "HITGEO-DS")?
            .parse()
            .map_err(|e| Error::Format(format!("version: {e}")))?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let fingerprint = u64::from_str_radix(field(1, "fingerprint")?, 16)
            .map_err(|e| Error::Format(format!("fingerprint: {e}")))?;
        let seed: u64 = field(2, "seed")?
            .parse()
            .map_err(|e| Error::Format(format!("seed: {e}")))?;
        let n: usize = field(3, "trajectories")?
            .parse()
            .map_err(|e| Error::Format(format!("trajectories: {e}")))?;
        let counts = ints(field(4, "counts")?)?;
        let states = ints(field(5, "states")?)?;
        let actions = ints(field(6, "actions")?)?;
        if counts.len() != n
            || counts.contains(&0)
            || states.len() != counts.iter().sum::<usize>()
            || actions.len() + n != states.len()
        {
            return Err(Error::Format("inconsistent array lengths".into()));
        }
        let (mut si, mut ai) = (0, 0);
        let mut trajectories = Vec::with_capacity(n);
        for c in counts {
            trajectories.push(Trajectory {
                states: states[si..si + c].to_vec(),
                actions: actions[ai..ai + c - 1].to_vec(),
            });
            si += c;
            ai += c - 1;
        }
        Dataset::new(trajectories, fingerprint, seed)
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("index {v} exceeds u32")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_random_digraph_cmp, sample_trajectories, TabularPolicy};
    use proptest::prelude::*;

    fn sample(seed: u64, n: usize, len: usize) -> Dataset {
        let env = make_random_digraph_cmp(9, 3, 2, seed).unwrap();
        sample_trajectories(&env, &TabularPolicy::uniform(9, 3), n, len, seed).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn both_layouts_round_trip(seed in 0u64..1000, n in 1usize..6, len in 0usize..20) {
            let d = sample(seed, n, len);
            let mut bin = Vec::new();
            d.write_binary(&mut bin).unwrap();
            prop_assert_eq!(&Dataset::read_binary(&mut bin.as_slice()).unwrap(), &d);
            let mut txt = Vec::new();
            d.write_text(&mut txt).unwrap();
            prop_assert_eq!(&Dataset::read_text(&mut txt.as_slice()).unwrap(), &d);
        }
    }

    #[test]
    fn extension_selects_layout() {
        let d = sample(1, 3, 7);
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("d.bin");
        let txt = dir.path().join("d.txt");
        d.save(&bin).unwrap();
        d.save(&txt).unwrap();
        assert!(std::fs::read(&bin).unwrap().starts_with(DATASET_MAGIC));
        assert!(std::fs::read_to_string(&txt)
            .unwrap()
            .starts_with("HITGEO-DS 1\n"));
        assert_eq!(Dataset::load(&bin).unwrap(), d);
        assert_eq!(Dataset::load(&txt).unwrap(), d);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let d = sample(2, 2, 4);
        let mut bin = Vec::new();
        d.write_binary(&mut bin).unwrap();
        bin[0] = b'X';
        assert!(Dataset::read_binary(&mut bin.as_slice()).is_err());
        let text = "HITGEO-DS 1\nfingerprint 00\nseed 1\ntrajectories 1\ncounts 3\nstates 0 1\nactions 0 0\n";
        assert!(Dataset::read_text(&mut text.as_bytes()).is_err());
    }
}
