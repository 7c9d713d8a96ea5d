//! CSV readers and writers for the four input schemas.
//!
//! All files are UTF-8, comma separated, with a header row:
//!
//! | file        | header                                        |
//! |-------------|-----------------------------------------------|
//! | cases       | `region,date,cum_cases,cum_deaths`            |
//! | flows       | `origin,dest,commuters`                       |
//! | contiguity  | `region_a,region_b`                           |
//! | covariates  | `region,group,population,<covariate columns>` |

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ContiguityGraph, FlowEdge, FlowNetwork, SelfFlows};
use crate::panel::{Covariate, RegionId};

/// Handling of region ids that are absent from the reference region set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownRegionPolicy {
    #[default]
    DropWarn,
    Fail,
}

impl FromStr for UnknownRegionPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" | "drop_warn" => Ok(UnknownRegionPolicy::DropWarn),
            "fail" => Ok(UnknownRegionPolicy::Fail),
            other => Err(Error::Config(format!("unknown region policy `{other}`"))),
        }
    }
}

/// Warnings collected while parsing.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParseReport {
    pub dropped_rows: usize,
    pub warnings: Vec<String>,
}

/// One row of the cumulative cases file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CumulativeRow {
    pub region: RegionId,
    pub date: NaiveDate,
    pub cum_cases: u64,
    pub cum_deaths: u64,
}

/// Region attributes from the covariates file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTable {
    pub regions: Vec<RegionId>,
    pub groups: Vec<String>,
    pub population: Vec<u64>,
    pub covariates: Vec<Covariate>,
}

impl RegionTable {
    pub fn region_set(&self) -> BTreeSet<RegionId> {
        self.regions.iter().cloned().collect()
    }
}

struct Reader<'a> {
    path: &'a Path,
    inner: csv::Reader<Box<dyn Read + 'a>>,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path, expected: &[&str], exact: bool) -> Result<(Self, Vec<String>)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut inner = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(Box::new(file) as Box<dyn Read>);
        let headers: Vec<String> = inner
            .headers()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: e.to_string(),
            })?
            .iter()
            .map(|s| s.trim_start_matches('\u{feff}').to_string())
            .collect();
        let prefix_ok = headers.len() >= expected.len()
            && headers.iter().zip(expected).all(|(h, e)| h == e);
        if !prefix_ok || (exact && headers.len() != expected.len()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!(
                    "expected header `{}`, found `{}`",
                    expected.join(","),
                    headers.join(",")
                ),
            });
        }
        Ok((Reader { path, inner }, headers))
    }

    fn records(&mut self) -> Result<Vec<(u64, csv::StringRecord)>> {
        let path = self.path;
        self.inner
            .records()
            .map(|r| {
                r.map(|rec| (rec.position().map_or(0, |p| p.line()), rec))
                    .map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        line: e.position().map_or(0, |p| p.line()),
                        message: e.to_string(),
                    })
            })
            .collect()
    }

    fn err(&self, line: u64, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn field<T: FromStr>(&self, rec: &csv::StringRecord, i: usize, what: &str, line: u64) -> Result<T> {
        let raw = rec.get(i).ok_or_else(|| self.err(line, format!("missing field `{what}`")))?;
        raw.parse()
            .map_err(|_| self.err(line, format!("invalid {what} `{raw}`")))
    }

    fn region(&self, rec: &csv::StringRecord, i: usize, line: u64) -> Result<RegionId> {
        let raw = rec.get(i).unwrap_or("");
        RegionId::new(raw).map_err(|_| self.err(line, "empty region id"))
    }
}

fn check_known(
    region: &RegionId,
    known: Option<&BTreeSet<RegionId>>,
    policy: UnknownRegionPolicy,
    context: &str,
    report: &mut ParseReport,
) -> Result<bool> {
    match known {
        Some(set) if !set.contains(region) => match policy {
            UnknownRegionPolicy::Fail => Err(Error::UnknownRegion {
                region: region.to_string(),
                context: context.to_string(),
            }),
            UnknownRegionPolicy::DropWarn => {
                report.dropped_rows += 1;
                report
                    .warnings
                    .push(format!("dropped row with unknown region `{region}` in {context}"));
                Ok(false)
            }
        },
        _ => Ok(true),
    }
}

pub fn parse_cases(
    path: &Path,
    known: Option<&BTreeSet<RegionId>>,
    policy: UnknownRegionPolicy,
) -> Result<(Vec<CumulativeRow>, ParseReport)> {
    let (mut rd, _) = Reader::open(path, &["region", "date", "cum_cases", "cum_deaths"], true)?;
    let mut rows = Vec::new();
    let mut report = ParseReport::default();
    let records = rd.records()?;
    for (line, rec) in records {
        let region = rd.region(&rec, 0, line)?;
        let raw_date = rec.get(1).unwrap_or("");
        let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d")
            .map_err(|_| rd.err(line, format!("invalid date `{raw_date}`")))?;
        let cum_cases = rd.field(&rec, 2, "cum_cases", line)?;
        let cum_deaths = rd.field(&rec, 3, "cum_deaths", line)?;
        if check_known(&region, known, policy, "cases file", &mut report)? {
            rows.push(CumulativeRow {
                region,
                date,
                cum_cases,
                cum_deaths,
            });
        }
    }
    Ok((rows, report))
}

pub fn parse_flows(
    path: &Path,
    known: Option<&BTreeSet<RegionId>>,
    policy: UnknownRegionPolicy,
    self_flows: SelfFlows,
) -> Result<(FlowNetwork, ParseReport)> {
    let (mut rd, _) = Reader::open(path, &["origin", "dest", "commuters"], true)?;
    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    let mut report = ParseReport::default();
    let records = rd.records()?;
    for (line, rec) in records {
        let origin = rd.region(&rec, 0, line)?;
        let dest = rd.region(&rec, 1, line)?;
        let commuters: u64 = rd.field(&rec, 2, "commuters", line)?;
        if !seen.insert((origin.clone(), dest.clone())) {
            return Err(rd.err(line, format!("duplicate flow {origin} -> {dest}")));
        }
        if check_known(&origin, known, policy, "flows file", &mut report)?
            && check_known(&dest, known, policy, "flows file", &mut report)?
        {
            edges.push(FlowEdge {
                origin,
                dest,
                commuters,
            });
        }
    }
    Ok((FlowNetwork::new(edges, self_flows)?, report))
}

/// Parses undirected pairs and symmetrizes them; one-sided pairs are listed
/// in the report warnings.
pub fn parse_contiguity(
    path: &Path,
    known: Option<&BTreeSet<RegionId>>,
    policy: UnknownRegionPolicy,
) -> Result<(ContiguityGraph, ParseReport)> {
    let (mut rd, _) = Reader::open(path, &["region_a", "region_b"], true)?;
    let mut pairs = Vec::new();
    let mut report = ParseReport::default();
    let records = rd.records()?;
    for (line, rec) in records {
        let a = rd.region(&rec, 0, line)?;
        let b = rd.region(&rec, 1, line)?;
        if a == b {
            return Err(rd.err(line, format!("self-adjacency for `{a}`")));
        }
        if check_known(&a, known, policy, "contiguity file", &mut report)?
            && check_known(&b, known, policy, "contiguity file", &mut report)?
        {
            pairs.push((a, b));
        }
    }
    let (graph, sym) = ContiguityGraph::from_pairs(pairs)?;
    if !sym.asymmetric_pairs.is_empty() {
        report.warnings.push(format!(
            "symmetrized {} one-sided contiguity pairs",
            sym.asymmetric_pairs.len()
        ));
    }
    let graph = match known {
        Some(set) => graph.with_regions(set.iter()),
        None => graph,
    };
    Ok((graph, report))
}

/// Parses the covariates file. Empty covariate cells become NaN and are
/// rejected later by whichever consumer uses the column.
pub fn parse_covariates(path: &Path) -> Result<RegionTable> {
    let (mut rd, headers) = Reader::open(path, &["region", "group", "population"], false)?;
    let names: Vec<String> = headers[3..].to_vec();
    let mut table = RegionTable {
        regions: Vec::new(),
        groups: Vec::new(),
        population: Vec::new(),
        covariates: names
            .iter()
            .map(|n| Covariate {
                name: n.clone(),
                values: Vec::new(),
            })
            .collect(),
    };
    let mut seen = HashSet::new();
    let records = rd.records()?;
    for (line, rec) in records {
        if rec.len() != headers.len() {
            return Err(rd.err(line, format!("expected {} fields, found {}", headers.len(), rec.len())));
        }
        let region = rd.region(&rec, 0, line)?;
        if !seen.insert(region.clone()) {
            return Err(rd.err(line, format!("duplicate region `{region}`")));
        }
        let group = rec.get(1).unwrap_or("").to_string();
        if group.is_empty() {
            return Err(rd.err(line, "empty group"));
        }
        let population: u64 = rd.field(&rec, 2, "population", line)?;
        if population == 0 {
            return Err(rd.err(line, "population must be positive"));
        }
        for (k, cov) in table.covariates.iter_mut().enumerate() {
            let raw = rec.get(k + 3).unwrap_or("");
            let v = if raw.is_empty() {
                f64::NAN
            } else {
                raw.parse::<f64>()
                    .map_err(|_| rd.err(line, format!("invalid value `{raw}` for `{}`", cov.name)))?
            };
            cov.values.push(v);
        }
        table.regions.push(region);
        table.groups.push(group);
        table.population.push(population);
    }
    Ok(table)
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn finish(path: &Path, mut w: csv::Writer<File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_cases(path: &Path, rows: &[CumulativeRow]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["region", "date", "cum_cases", "cum_deaths"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.region.as_str(),
            &r.date.format("%Y-%m-%d").to_string(),
            &r.cum_cases.to_string(),
            &r.cum_deaths.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

pub fn write_flows(path: &Path, net: &FlowNetwork) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["origin", "dest", "commuters"])
        .map_err(|e| csv_err(path, e))?;
    for e in net.edges() {
        w.write_record([e.origin.as_str(), e.dest.as_str(), &e.commuters.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

pub fn write_contiguity(path: &Path, graph: &ContiguityGraph) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["region_a", "region_b"])
        .map_err(|e| csv_err(path, e))?;
    for (a, b) in graph.pairs() {
        w.write_record([a.as_str(), b.as_str()])
            .map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

pub fn write_covariates(path: &Path, table: &RegionTable) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["region".to_string(), "group".into(), "population".into()];
    header.extend(table.covariates.iter().map(|c| c.name.clone()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in 0..table.regions.len() {
        let mut rec = vec![
            table.regions[i].to_string(),
            table.groups[i].clone(),
            table.population[i].to_string(),
        ];
        rec.extend(table.covariates.iter().map(|c| {
            let v = c.values[i];
            if v.is_nan() {
                String::new()
            } else {
                v.to_string()
            }
        }));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

/// Writes any small text artifact, mapping IO errors to the path.
pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn r(s: &str) -> RegionId {
        RegionId::new(s).unwrap()
    }

    #[test]
    fn flows_sum_out_totals() {
        let f = file("origin,dest,commuters\nA,B,60\nA,C,40\n");
        let (net, rep) = parse_flows(f.path(), None, UnknownRegionPolicy::Fail, SelfFlows::Exclude).unwrap();
        assert_eq!(net.out_total(&r("A")), 100);
        assert!(rep.warnings.is_empty());
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = file("origin,dest,commuters\nA,B,60\nA,C,forty\n");
        match parse_flows(f.path(), None, UnknownRegionPolicy::Fail, SelfFlows::Exclude) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("forty"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        let f = file("origin,dest,commuters\nA,B,-4\n");
        assert!(matches!(
            parse_flows(f.path(), None, UnknownRegionPolicy::Fail, SelfFlows::Exclude),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let f = file("from,to,n\nA,B,1\n");
        assert!(matches!(
            parse_flows(f.path(), None, UnknownRegionPolicy::Fail, SelfFlows::Exclude),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn contiguity_is_symmetrized() {
        let f = file("region_a,region_b\nA,B\n");
        let (g, rep) = parse_contiguity(f.path(), None, UnknownRegionPolicy::Fail).unwrap();
        assert!(g.are_adjacent(&r("A"), &r("B")));
        assert!(g.are_adjacent(&r("B"), &r("A")));
        assert_eq!(rep.warnings.len(), 1);
    }

    #[test]
    fn unknown_regions_policy() {
        let known: BTreeSet<_> = [r("A"), r("B")].into();
        let f = file("origin,dest,commuters\nA,B,1\nA,Z,2\n");
        let (net, rep) =
            parse_flows(f.path(), Some(&known), UnknownRegionPolicy::DropWarn, SelfFlows::Exclude).unwrap();
        assert_eq!(net.edges().len(), 1);
        assert_eq!(rep.dropped_rows, 1);
        assert!(matches!(
            parse_flows(f.path(), Some(&known), UnknownRegionPolicy::Fail, SelfFlows::Exclude),
            Err(Error::UnknownRegion { .. })
        ));
    }

    #[test]
    fn covariates_parse_with_blank_cells() {
        let f = file("region,group,population,x,y\nA,s1,100,1.5,\nB,s2,200,-2,3\n");
        let t = parse_covariates(f.path()).unwrap();
        assert_eq!(t.population, vec![100, 200]);
        assert_eq!(t.covariates[0].values, vec![1.5, -2.0]);
        assert!(t.covariates[1].values[0].is_nan());
        let f = file("region,group,population\nA,s1,0\n");
        assert!(matches!(parse_covariates(f.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn cases_parse_dates() {
        let f = file("region,date,cum_cases,cum_deaths\nA,2020-03-31,0,0\nA,2020-04-14,5,1\n");
        let (rows, _) = parse_cases(f.path(), None, UnknownRegionPolicy::Fail).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].cum_cases, 5);
        let f = file("region,date,cum_cases,cum_deaths\nA,04/14/2020,5,1\n");
        assert!(matches!(
            parse_cases(f.path(), None, UnknownRegionPolicy::Fail),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn writers_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = FlowNetwork::new(
            vec![
                FlowEdge { origin: r("A"), dest: r("B"), commuters: 3 },
                FlowEdge { origin: r("B"), dest: r("A"), commuters: 9 },
            ],
            SelfFlows::Exclude,
        )
        .unwrap();
        let p = dir.path().join("flows.csv");
        write_flows(&p, &net).unwrap();
        let (back, _) = parse_flows(&p, None, UnknownRegionPolicy::Fail, SelfFlows::Exclude).unwrap();
        assert_eq!(net, back);

        let table = RegionTable {
            regions: vec![r("A"), r("B")],
            groups: vec!["g1".into(), "g2".into()],
            population: vec![10, 20],
            covariates: vec![Covariate { name: "x".into(), values: vec![0.1 + 0.2, -1e-300] }],
        };
        let p = dir.path().join("cov.csv");
        write_covariates(&p, &table).unwrap();
        assert_eq!(parse_covariates(&p).unwrap(), table);
    }
}
