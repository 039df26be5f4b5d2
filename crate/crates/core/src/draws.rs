//! Posterior draws indexed by (superchain, subchain, iteration), with CSV persistence.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::data::LongitudinalDataset;
use crate::spec::ModelSpec;
use crate::state::{core_paths, Dims, ParameterState, Variant};

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub variant: Variant,
    pub superchains: usize,
    pub subchains: usize,
    pub iterations: usize,
    pub warmup: usize,
    pub core_paths: Vec<String>,
    /// Empty when subject effects were not kept.
    pub subject_paths: Vec<String>,
    /// One row per draw, chain-major: `((s * subchains + m) * iterations + n)`.
    pub core: Vec<f64>,
    /// One row per post-warmup draw, same ordering restricted to `n >= warmup`.
    pub subject: Vec<f64>,
}

impl PosteriorDraws {
    /// Wraps fixed states as one post-warmup chain, e.g. to check against known parameters.
    pub fn from_states(spec: &ModelSpec, data: &LongitudinalDataset, states: &[ParameterState]) -> Result<Self> {
        let first = states.first().ok_or_else(|| Error::Usage("at least one state is required".into()))?;
        let variant = first.variant();
        let dims = Dims::new(spec, data);
        let keep_subject = variant.has_subject() && !first.subject.is_empty();
        let mut core = Vec::new();
        let mut subject = Vec::new();
        for s in states {
            if s.variant() != variant {
                return Err(Error::Usage("states mix model variants".into()));
            }
            let row = s.flatten_core();
            if row.len() != crate::state::core_len(&dims, variant) {
                return Err(Error::Usage("state does not match the dataset dimensions".into()));
            }
            core.extend(row);
            if keep_subject {
                if s.subject.len() != dims.n_part * 2 * dims.l {
                    return Err(Error::Usage("state subject effects do not match the dataset".into()));
                }
                subject.extend(&s.subject);
            }
        }
        Ok(PosteriorDraws {
            variant,
            superchains: 1,
            subchains: 1,
            iterations: states.len(),
            warmup: 0,
            core_paths: core_paths(spec, &dims, &data.cohort_ids, variant),
            subject_paths: if keep_subject { crate::state::subject_paths(&dims, data) } else { Vec::new() },
            core,
            subject,
        })
    }

    pub fn n_chains(&self) -> usize {
        self.superchains * self.subchains
    }

    pub fn n_post(&self) -> usize {
        self.n_chains() * (self.iterations - self.warmup)
    }

    pub fn has_subject(&self) -> bool {
        !self.subject_paths.is_empty()
    }

    fn core_width(&self) -> usize {
        self.core_paths.len()
    }

    pub fn core_row(&self, s: usize, m: usize, n: usize) -> &[f64] {
        let w = self.core_width();
        let row = (s * self.subchains + m) * self.iterations + n;
        &self.core[row * w..(row + 1) * w]
    }

    pub fn subject_row(&self, s: usize, m: usize, n: usize) -> Option<&[f64]> {
        if !self.has_subject() || n < self.warmup {
            return None;
        }
        let w = self.subject_paths.len();
        let post = self.iterations - self.warmup;
        let row = (s * self.subchains + m) * post + (n - self.warmup);
        Some(&self.subject[row * w..(row + 1) * w])
    }

    /// `(s, m, n)` of the `j`-th post-warmup draw.
    pub fn post_index(&self, j: usize) -> (usize, usize, usize) {
        let post = self.iterations - self.warmup;
        let chain = j / post;
        (chain / self.subchains, chain % self.subchains, self.warmup + j % post)
    }

    pub fn state(&self, dims: &Dims, s: usize, m: usize, n: usize) -> Result<ParameterState> {
        ParameterState::from_flat(dims, self.variant, self.core_row(s, m, n), self.subject_row(s, m, n).unwrap_or(&[]))
    }

    pub fn post_state(&self, dims: &Dims, j: usize) -> Result<ParameterState> {
        let (s, m, n) = self.post_index(j);
        self.state(dims, s, m, n)
    }

    /// Index of a parameter path: core paths first, then subject paths.
    pub fn path_index(&self, path: &str) -> Option<usize> {
        self.core_paths
            .iter()
            .chain(&self.subject_paths)
            .position(|p| p == path)
    }

    pub fn n_paths(&self) -> usize {
        self.core_paths.len() + self.subject_paths.len()
    }

    /// Post-warmup values of one scalar, as `[superchain][subchain][draw]`.
    pub fn series(&self, idx: usize) -> Vec<Vec<Vec<f64>>> {
        let nc = self.core_width();
        (0..self.superchains)
            .map(|s| {
                (0..self.subchains)
                    .map(|m| {
                        (self.warmup..self.iterations)
                            .map(|n| {
                                if idx < nc {
                                    self.core_row(s, m, n)[idx]
                                } else {
                                    self.subject_row(s, m, n).expect("subject rows kept")[idx - nc]
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// `d` post-warmup indices spread evenly over the pooled chains.
    pub fn equally_spaced(&self, d: usize) -> Result<Vec<usize>> {
        let n = self.n_post();
        if d == 0 || d > n {
            return Err(Error::Usage(format!("requested {d} draws but {n} post-warmup draws are available")));
        }
        Ok((0..d).map(|j| j * n / d).collect())
    }

    /// Dimensions for `data`, after checking that these draws came from a fit of it.
    pub fn aligned_dims(&self, spec: &ModelSpec, data: &LongitudinalDataset) -> Result<Dims> {
        let dims = Dims::new(spec, data);
        if self.core_paths != core_paths(spec, &dims, &data.cohort_ids, self.variant) {
            return Err(Error::Usage("draws do not match the model and dataset".into()));
        }
        if self.has_subject() && self.subject_paths.len() != dims.n_part * 2 * dims.l {
            return Err(Error::Usage("draws carry subject effects for a different set of participants".into()));
        }
        Ok(dims)
    }

    /// Pooled post-warmup values of one scalar.
    pub fn pooled(&self, idx: usize) -> Vec<f64> {
        self.series(idx).into_iter().flatten().flatten().collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header = vec!["superchain".to_string(), "subchain".into(), "iteration".into(), "warmup".into()];
        header.extend(self.core_paths.iter().cloned());
        header.extend(self.subject_paths.iter().cloned());
        w.write_record(&header)?;
        let ns = self.subject_paths.len();
        let mut rec: Vec<String> = Vec::with_capacity(header.len());
        for s in 0..self.superchains {
            for m in 0..self.subchains {
                for n in 0..self.iterations {
                    rec.clear();
                    rec.push(s.to_string());
                    rec.push(m.to_string());
                    rec.push(n.to_string());
                    rec.push(if n < self.warmup { "1" } else { "0" }.into());
                    rec.extend(self.core_row(s, m, n).iter().map(|v| format!("{v}")));
                    match self.subject_row(s, m, n) {
                        Some(row) => rec.extend(row.iter().map(|v| format!("{v}"))),
                        None => rec.extend(std::iter::repeat_n("NA".to_string(), ns)),
                    }
                    w.write_record(&rec)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        if header.len() < 4 || header[..4] != ["superchain", "subchain", "iteration", "warmup"] {
            return Err(Error::Data { line: 1, msg: "draws header must start with superchain,subchain,iteration,warmup".into() });
        }
        let paths = &header[4..];
        let n_core = paths.iter().take_while(|p| !p.starts_with("b_subject.")).count();
        let core_paths = paths[..n_core].to_vec();
        let subject_paths = paths[n_core..].to_vec();
        let has_sigma = core_paths.iter().any(|p| p.starts_with("sigma."));
        let has_lambda = core_paths.iter().any(|p| p.starts_with("lambda."));
        let variant = match (has_sigma, has_lambda) {
            (true, true) => Variant::Full,
            (true, false) => Variant::NoCohort,
            (false, true) => Variant::NoParticipant,
            (false, false) => return Err(Error::Data { line: 1, msg: "draws carry neither sigma nor lambda".into() }),
        };
        let mut core = Vec::new();
        let mut subject = Vec::new();
        let (mut ns, mut nm, mut ni, mut nwarm) = (0, 0, 0, 0);
        for (j, row) in r.records().enumerate() {
            let row = row?;
            let line = j + 2;
            let parse = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| Error::Data { line, msg: format!("bad index '{s}'") })
            };
            let (s, m, n) = (parse(&row[0])?, parse(&row[1])?, parse(&row[2])?);
            let warm = &row[3] == "1";
            ns = ns.max(s + 1);
            nm = nm.max(m + 1);
            ni = ni.max(n + 1);
            if warm {
                nwarm = nwarm.max(n + 1);
            }
            for v in row.iter().skip(4).take(n_core) {
                core.push(v.parse::<f64>().map_err(|_| Error::Data { line, msg: format!("bad value '{v}'") })?);
            }
            if !warm && !subject_paths.is_empty() {
                for v in row.iter().skip(4 + n_core) {
                    subject.push(v.parse::<f64>().map_err(|_| Error::Data { line, msg: format!("bad value '{v}'") })?);
                }
            }
        }
        let d = PosteriorDraws {
            variant,
            superchains: ns,
            subchains: nm,
            iterations: ni,
            warmup: nwarm,
            core_paths,
            subject_paths,
            core,
            subject,
        };
        if d.core.len() != ns * nm * ni * d.core_paths.len() {
            return Err(Error::Data { line: 0, msg: "draws file is not a complete superchain/subchain/iteration grid".into() });
        }
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> PosteriorDraws {
        let (s, m, it, wu) = (2, 2, 3, 1);
        let core_paths = vec!["alpha.rf1.intercept.intercept".to_string(), "sigma.0.0".into(), "psi.rf1".into()];
        let subject_paths = vec!["b_subject.c1.5.rf1.intercept".to_string()];
        let core: Vec<f64> = (0..s * m * it * 3).map(|v| v as f64 * 0.5).collect();
        let subject: Vec<f64> = (0..s * m * (it - wu)).map(|v| -(v as f64)).collect();
        PosteriorDraws {
            variant: Variant::NoCohort,
            superchains: s,
            subchains: m,
            iterations: it,
            warmup: wu,
            core_paths,
            subject_paths,
            core,
            subject,
        }
    }

    #[test]
    fn csv_round_trip() {
        let d = toy();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(",NA"));
        assert!(!text.contains('\r'));
        let back = PosteriorDraws::read_csv(&buf[..]).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn indexing() {
        let d = toy();
        assert_eq!(d.n_post(), 8);
        assert_eq!(d.post_index(0), (0, 0, 1));
        assert_eq!(d.post_index(3), (0, 1, 2));
        assert_eq!(d.pooled(3).len(), 8);
        assert_eq!(d.series(0)[1][0], vec![d.core_row(1, 0, 1)[0], d.core_row(1, 0, 2)[0]]);
        assert!(d.subject_row(0, 0, 0).is_none());
        assert_eq!(d.equally_spaced(4).unwrap(), vec![0, 2, 4, 6]);
        assert_eq!(d.equally_spaced(8).unwrap(), (0..8).collect::<Vec<_>>());
        assert!(d.equally_spaced(9).is_err());
    }
}
