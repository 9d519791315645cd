//! Job description file: one directive per line.
//!
//! ```text
//! # processes at two sites
//! subjob site=A machine=SP count=4 vendor=true exe=./app -- -n 10
//! subjob site=B machine=C1 count=4 vendor=false exe=./app
//! option timeout=30
//! option bind=127.0.0.1
//! ```
//!
//! Line order defines subjob order and therefore world-rank assignment.

use std::time::Duration;

use gridmp::error::{Error, Result};
use gridmp::{JobLayout, SubjobSpec};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// One subjob plus how to start it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchSubjob {
    pub site: String,
    pub machine: String,
    pub count: usize,
    pub vendor: bool,
    pub exe: String,
    pub args: Vec<String>,
    /// Extra environment for every process of the subjob, on top of the
    /// bootstrap variables the launcher always sets.
    pub extra_env: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobDescription {
    pub subjobs: Vec<LaunchSubjob>,
    pub timeout: Duration,
    pub bind: String,
}

impl JobDescription {
    pub fn layout(&self) -> JobLayout {
        JobLayout::new(
            self.subjobs
                .iter()
                .map(|s| SubjobSpec::new(&s.site, &s.machine, s.count, s.vendor))
                .collect(),
        )
    }

    pub fn world_size(&self) -> usize {
        self.subjobs.iter().map(|s| s.count).sum()
    }
}

fn err(lineno: usize, msg: impl std::fmt::Display) -> Error {
    Error::InvalidLayout(format!("job file line {lineno}: {msg}"))
}

fn parse_subjob(lineno: usize, tokens: &[&str]) -> Result<LaunchSubjob> {
    let mut site = None;
    let mut machine = None;
    let mut count = None;
    let mut vendor = None;
    let mut exe = None;
    let mut args = Vec::new();

    let mut it = tokens.iter();
    while let Some(&tok) = it.next() {
        if tok == "--" {
            args = it.map(|s| s.to_string()).collect();
            break;
        }
        let Some((key, value)) = tok.split_once('=') else {
            return Err(err(lineno, format!("expected key=value, got {tok:?}")));
        };
        match key {
            "site" => site = Some(value.to_string()),
            "machine" => machine = Some(value.to_string()),
            "count" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| err(lineno, format!("count={value:?} is not a number")))?;
                if n == 0 {
                    return Err(err(lineno, "count must be at least 1"));
                }
                count = Some(n);
            }
            "vendor" => {
                vendor = Some(match value {
                    "true" => true,
                    "false" => false,
                    other => return Err(err(lineno, format!("vendor={other:?} is not true/false"))),
                })
            }
            "exe" => {
                if value.is_empty() {
                    return Err(err(lineno, "exe must not be empty"));
                }
                exe = Some(value.to_string());
            }
            other => return Err(err(lineno, format!("unknown subjob key {other:?}"))),
        }
    }

    fn require<T>(lineno: usize, name: &str, v: Option<T>) -> Result<T> {
        v.ok_or_else(|| err(lineno, format!("missing {name}=")))
    }
    Ok(LaunchSubjob {
        site: require(lineno, "site", site)?,
        machine: require(lineno, "machine", machine)?,
        count: require(lineno, "count", count)?,
        vendor: require(lineno, "vendor", vendor)?,
        exe: require(lineno, "exe", exe)?,
        args,
        extra_env: Vec::new(),
    })
}

/// Parse and validate a job file. Errors carry the offending line number.
pub fn parse_job(text: &str) -> Result<JobDescription> {
    let mut job =
        JobDescription { subjobs: Vec::new(), timeout: DEFAULT_TIMEOUT, bind: "127.0.0.1".into() };
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "subjob" => job.subjobs.push(parse_subjob(lineno, &tokens[1..])?),
            "option" => {
                for tok in &tokens[1..] {
                    let Some((key, value)) = tok.split_once('=') else {
                        return Err(err(lineno, format!("expected key=value, got {tok:?}")));
                    };
                    match key {
                        "timeout" => {
                            let secs: u64 = value.parse().map_err(|_| {
                                err(lineno, format!("timeout={value:?} is not a number of seconds"))
                            })?;
                            job.timeout = Duration::from_secs(secs);
                        }
                        "bind" => job.bind = value.to_string(),
                        other => return Err(err(lineno, format!("unknown option {other:?}"))),
                    }
                }
            }
            other => return Err(err(lineno, format!("unknown directive {other:?}"))),
        }
    }
    if job.subjobs.is_empty() {
        return Err(Error::InvalidLayout("job file declares no subjobs".into()));
    }
    // Run the layout validation now so machine/site conflicts surface as
    // parse-time errors.
    gridmp::compute_topology(&job.layout())?;
    Ok(job)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grammar_example_line() {
        let job = parse_job("subjob site=A machine=SP count=4 vendor=true exe=./app -- -n 10\n")
            .unwrap();
        assert_eq!(job.subjobs.len(), 1);
        let s = &job.subjobs[0];
        assert_eq!(
            (s.site.as_str(), s.machine.as_str(), s.count, s.vendor, s.exe.as_str()),
            ("A", "SP", 4, true, "./app")
        );
        assert_eq!(s.args, vec!["-n", "10"]);
        assert_eq!(job.timeout, DEFAULT_TIMEOUT);
    }

    #[test]
    fn ranks_assigned_in_line_order() {
        let text = "\
# two subjobs
subjob site=A machine=M1 count=2 vendor=false exe=/bin/true
subjob site=B machine=M2 count=3 vendor=false exe=/bin/true
option timeout=7 bind=0.0.0.0
";
        let job = parse_job(text).unwrap();
        assert_eq!(job.world_size(), 5);
        let layout = job.layout();
        assert_eq!(layout.base_rank(0), 0);
        assert_eq!(layout.base_rank(1), 2);
        assert_eq!(job.timeout, Duration::from_secs(7));
        assert_eq!(job.bind, "0.0.0.0");
    }

    #[test]
    fn zero_count_names_the_line() {
        let text = "subjob site=A machine=M count=1 vendor=false exe=/bin/true\n\
                    subjob site=B machine=N count=0 vendor=false exe=/bin/true\n";
        let e = parse_job(text).unwrap_err().to_string();
        assert!(e.contains("line 2"), "got: {e}");
    }

    #[test]
    fn unknown_keys_and_directives_rejected() {
        assert!(parse_job("subjob site=A machine=M count=1 vendor=false exe=/a nodes=9\n")
            .unwrap_err()
            .to_string()
            .contains("unknown subjob key"));
        assert!(parse_job("launch now\n").unwrap_err().to_string().contains("unknown directive"));
        assert!(parse_job("option retries=3\n").unwrap_err().to_string().contains("unknown option"));
    }

    #[test]
    fn missing_required_key_rejected() {
        let e = parse_job("subjob site=A machine=M count=1 exe=/a\n").unwrap_err().to_string();
        assert!(e.contains("missing vendor="), "got: {e}");
    }

    #[test]
    fn duplicate_machine_across_sites_rejected() {
        let text = "subjob site=A machine=M count=1 vendor=false exe=/a\n\
                    subjob site=B machine=M count=1 vendor=false exe=/a\n";
        assert!(parse_job(text).is_err());
    }

    #[test]
    fn empty_job_rejected() {
        assert!(parse_job("# nothing here\n").is_err());
    }
}
