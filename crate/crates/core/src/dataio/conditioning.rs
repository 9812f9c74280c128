use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Rows: source position (3), source orientation quaternion `x y z w` (4),
/// listener position (3), listener orientation quaternion (4).
pub const N_FEATURES: usize = 14;
const SOURCE_POS: usize = 0;
const LISTENER_POS: usize = 7;
const LISTENER_ROT: usize = 10;

/// Half the inter-aural distance, metres.
pub const DEFAULT_EAR_OFFSET: f64 = 0.0875;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ear {
    Left,
    Right,
}

impl Ear {
    pub const BOTH: [Ear; 2] = [Ear::Left, Ear::Right];

    pub fn index(self) -> usize {
        match self {
            Ear::Left => 0,
            Ear::Right => 1,
        }
    }
}

/// Per-sample source/listener pose sequence, stored `[features, length]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningTrack {
    frames: Array2<f64>,
    sample_rate: u32,
    resampled_from: Option<u32>,
}

fn rotate(q: [f64; 4], v: [f64; 3]) -> [f64; 3] {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if norm == 0.0 {
        return v;
    }
    let (x, y, z, w) = (q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm);
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let u = [x, y, z];
    let t = cross(u, v).map(|c| 2.0 * c);
    let ut = cross(u, t);
    [
        v[0] + w * t[0] + ut[0],
        v[1] + w * t[1] + ut[1],
        v[2] + w * t[2] + ut[2],
    ]
}

pub(crate) fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl ConditioningTrack {
    pub fn new(frames: Array2<f64>, sample_rate: u32) -> Result<Self> {
        if frames.ncols() == 0 || frames.nrows() == 0 {
            return Err(Error::Validation("conditioning track is empty".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Validation("conditioning sample rate must be positive".into()));
        }
        if let Some(bad) = frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite conditioning value at flat index {bad}")));
        }
        Ok(Self {
            frames,
            sample_rate,
            resampled_from: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.frames.nrows()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn resampled_from(&self) -> Option<u32> {
        self.resampled_from
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    fn vec3(&self, row: usize, t: usize) -> [f64; 3] {
        [self.frames[[row, t]], self.frames[[row + 1, t]], self.frames[[row + 2, t]]]
    }

    pub fn source_position(&self, t: usize) -> [f64; 3] {
        self.vec3(SOURCE_POS, t)
    }

    /// World position of an ear: the listener position offset by
    /// `±ear_offset` along the listener's local +y (left) axis.
    pub fn ear_position(&self, t: usize, ear: Ear, ear_offset: f64) -> [f64; 3] {
        let p = self.vec3(LISTENER_POS, t);
        let q = [
            self.frames[[LISTENER_ROT, t]],
            self.frames[[LISTENER_ROT + 1, t]],
            self.frames[[LISTENER_ROT + 2, t]],
            self.frames[[LISTENER_ROT + 3, t]],
        ];
        let side = match ear {
            Ear::Left => ear_offset,
            Ear::Right => -ear_offset,
        };
        let o = rotate(q, [0.0, side, 0.0]);
        [p[0] + o[0], p[1] + o[1], p[2] + o[2]]
    }

    /// Source-to-ear distance in metres.
    pub fn ear_distance(&self, t: usize, ear: Ear, ear_offset: f64) -> f64 {
        distance(self.source_position(t), self.ear_position(t, ear, ear_offset))
    }

    /// Frames `[offset, offset + len)`.
    pub fn window(&self, offset: usize, len: usize) -> ConditioningTrack {
        ConditioningTrack {
            frames: self.frames.slice(s![.., offset..offset + len]).to_owned(),
            sample_rate: self.sample_rate,
            resampled_from: self.resampled_from,
        }
    }

    /// Cyclic repetition of the track to exactly `len` frames.
    pub fn tile(&self, len: usize) -> ConditioningTrack {
        let n = self.len();
        ConditioningTrack {
            frames: Array2::from_shape_fn((self.n_features(), len), |(f, t)| self.frames[[f, t % n]]),
            sample_rate: self.sample_rate,
            resampled_from: self.resampled_from,
        }
    }

    /// Linear-interpolation rate conversion; poses vary slowly so no
    /// anti-aliasing is applied.
    pub fn resample_to(&self, rate: u32) -> ConditioningTrack {
        if rate == self.sample_rate {
            return self.clone();
        }
        let n = self.len();
        let out_len = ((n as u64 * rate as u64 + self.sample_rate as u64 / 2) / self.sample_rate as u64).max(1) as usize;
        let step = self.sample_rate as f64 / rate as f64;
        let frames = Array2::from_shape_fn((self.n_features(), out_len), |(f, t)| {
            let pos = (t as f64 * step).min((n - 1) as f64);
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            let a = self.frames[[f, i]];
            let b = self.frames[[f, (i + 1).min(n - 1)]];
            a + frac * (b - a)
        });
        ConditioningTrack {
            frames,
            sample_rate: rate,
            resampled_from: Some(self.resampled_from.unwrap_or(self.sample_rate)),
        }
    }
}

/// Result of drawing a conditioning window from a pool.
#[derive(Debug, Clone)]
pub struct ConditioningSample {
    pub track: ConditioningTrack,
    pub source_index: usize,
    pub offset: usize,
    /// Set when no pool track was long enough and the longest one was tiled.
    pub tiled: bool,
}

/// Uniformly picks a track long enough for `length` frames and a uniform start
/// offset inside it. Deterministic in `(pool, length, seed)`.
pub fn sample_conditioning(pool: &[ConditioningTrack], length: usize, seed: u64) -> Result<ConditioningSample> {
    if pool.is_empty() {
        return Err(Error::Validation("conditioning pool is empty".into()));
    }
    if length == 0 {
        return Err(Error::Validation("requested conditioning length is zero".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eligible: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].len() >= length).collect();
    if eligible.is_empty() {
        let (source_index, longest) = pool
            .iter()
            .enumerate()
            .max_by_key(|(i, t)| (t.len(), std::cmp::Reverse(*i)))
            .expect("non-empty pool");
        return Ok(ConditioningSample {
            track: longest.tile(length),
            source_index,
            offset: 0,
            tiled: true,
        });
    }
    let source_index = eligible[rng.gen_range(0..eligible.len())];
    let track = &pool[source_index];
    let offset = rng.gen_range(0..=track.len() - length);
    Ok(ConditioningSample {
        track: track.window(offset, length),
        source_index,
        offset,
        tiled: false,
    })
}

fn parse_header(line: &str, origin: &Path) -> Result<(u32, usize, usize)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let bad = |message: String| Error::Parse {
        path: origin.display().to_string(),
        line: 1,
        message,
    };
    if fields.len() != 3 {
        return Err(bad(format!(
            "header must be `sample_rate n_features n_samples`, got {} fields",
            fields.len()
        )));
    }
    let sr = fields[0].parse().map_err(|_| bad(format!("bad sample rate {:?}", fields[0])))?;
    let nf = fields[1].parse().map_err(|_| bad(format!("bad feature count {:?}", fields[1])))?;
    let ns = fields[2].parse().map_err(|_| bad(format!("bad sample count {:?}", fields[2])))?;
    Ok((sr, nf, ns))
}

/// Loads a conditioning matrix. Files ending in `.bin` hold the text header
/// line followed by little-endian `f64` values row by row; anything else is
/// whitespace-separated text, one row per feature. The track is resampled to
/// `target_rate` when given.
pub fn load_conditioning(path: &Path, target_rate: Option<u32>) -> Result<ConditioningTrack> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
    let (sr, nf, ns) = parse_header(&header, path)?;
    let binary = path.extension().is_some_and(|e| e == "bin");
    let data: Vec<f64> = if binary {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() != nf * ns * 8 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 2,
                message: format!("expected {} data bytes, found {}", nf * ns * 8, bytes.len()),
            });
        }
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        let mut data = Vec::with_capacity(nf * ns);
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line: i + 2,
                    message: format!("not a number: {tok:?}"),
                })?);
            }
            if data.len() - before != ns {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 2,
                    message: format!("expected {ns} values, found {}", data.len() - before),
                });
            }
        }
        if data.len() != nf * ns {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                message: format!("header promises {nf} rows, found {}", data.len() / ns.max(1)),
            });
        }
        data
    };
    let frames = Array2::from_shape_vec((nf, ns), data).expect("validated size");
    let track = ConditioningTrack::new(frames, sr)?;
    Ok(match target_rate {
        Some(rate) => track.resample_to(rate),
        None => track,
    })
}

pub fn save_conditioning(path: &Path, track: &ConditioningTrack) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{} {} {}", track.sample_rate, track.n_features(), track.len()).map_err(io)?;
    if path.extension().is_some_and(|e| e == "bin") {
        for v in track.frames.iter() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    } else {
        for row in track.frames.outer_iter() {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", line.join(" ")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
