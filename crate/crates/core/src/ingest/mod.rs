//! Input parsing, period aggregation of cumulative series, and region-level
//! covariate construction.

mod files;
mod indicators;
mod pca;

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::Serialize;

pub use files::{
    parse_cases, parse_contiguity, parse_covariates, parse_flows, write_cases, write_contiguity,
    write_covariates, write_flows, write_text, CumulativeRow, ParseReport, RegionTable,
    UnknownRegionPolicy,
};
pub use indicators::{above_average_indicator, threshold_indicator};
pub use pca::{disadvantage_index, DisadvantageIndex};

use crate::error::{Error, Result};
use crate::panel::{Panel, PanelParts, Period, RegionId};

/// Period grid: `n_periods` consecutive windows of `length_days` starting at
/// `start` (first day of the first period).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PeriodGrid {
    pub start: NaiveDate,
    pub length_days: u32,
    pub n_periods: usize,
}

impl PeriodGrid {
    pub fn periods(&self) -> Result<Vec<Period>> {
        Period::sequence(self.start, self.length_days, self.n_periods)
    }

    /// Dates whose cumulative totals delimit the periods: the day before the
    /// first period, then the last day of every period.
    pub fn boundaries(&self) -> Result<Vec<NaiveDate>> {
        let first = self
            .start
            .pred_opt()
            .ok_or_else(|| Error::InvalidData("start date out of range".into()))?;
        Ok(std::iter::once(first)
            .chain(self.periods()?.into_iter().map(|p| p.end))
            .collect())
    }
}

/// Diagnostics from [`build_panel`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PanelReport {
    /// Cells whose new count was negative and clamped to 0 (cases and deaths).
    pub clamped_cells: usize,
    /// Day-to-day decreases seen in the raw cumulative series.
    pub decreasing_steps: usize,
    pub dropped_regions: Vec<String>,
    pub warnings: Vec<String>,
}

/// New counts from cumulative totals at period boundaries: signed
/// differences plus clamped (≥ 0) counts and the number of clamps.
pub fn difference_cumulative(boundary_totals: &[u64]) -> (Vec<i64>, Vec<u64>, usize) {
    let mut signed = Vec::with_capacity(boundary_totals.len().saturating_sub(1));
    let mut clamped = Vec::with_capacity(signed.capacity());
    let mut clamps = 0;
    for w in boundary_totals.windows(2) {
        let d = w[1] as i64 - w[0] as i64;
        signed.push(d);
        if d < 0 {
            clamps += 1;
        }
        clamped.push(d.max(0) as u64);
    }
    (signed, clamped, clamps)
}

/// Aggregates cumulative daily series into a period panel over the regions
/// of `table` (in table order).
pub fn build_panel(
    raw: &[CumulativeRow],
    table: &RegionTable,
    grid: PeriodGrid,
    unknown: UnknownRegionPolicy,
) -> Result<(Panel, PanelReport)> {
    let periods = grid.periods()?;
    let boundaries = grid.boundaries()?;
    let mut report = PanelReport::default();

    let index: BTreeMap<&RegionId, usize> =
        table.regions.iter().enumerate().map(|(i, r)| (r, i)).collect();
    let mut series: Vec<BTreeMap<NaiveDate, (u64, u64)>> = vec![BTreeMap::new(); table.regions.len()];
    let mut dropped = std::collections::BTreeSet::new();
    for row in raw {
        let Some(&i) = index.get(&row.region) else {
            match unknown {
                UnknownRegionPolicy::Fail => {
                    return Err(Error::UnknownRegion {
                        region: row.region.to_string(),
                        context: "cases series".into(),
                    })
                }
                UnknownRegionPolicy::DropWarn => {
                    dropped.insert(row.region.to_string());
                    continue;
                }
            }
        };
        if series[i]
            .insert(row.date, (row.cum_cases, row.cum_deaths))
            .is_some()
        {
            return Err(Error::InvalidData(format!(
                "duplicate date {} for region `{}`",
                row.date, row.region
            )));
        }
    }
    report.dropped_regions = dropped.into_iter().collect();
    for r in &report.dropped_regions {
        report
            .warnings
            .push(format!("dropped cases for unknown region `{r}`"));
    }

    let n = table.regions.len();
    let t = periods.len();
    let mut cases = Vec::with_capacity(n);
    let mut deaths = Vec::with_capacity(n);
    let mut signed_cases = Vec::with_capacity(n);
    let mut signed_deaths = Vec::with_capacity(n);
    for (i, s) in series.iter().enumerate() {
        let decreasing = s
            .values()
            .collect::<Vec<_>>()
            .windows(2)
            .filter(|w| w[1].0 < w[0].0 || w[1].1 < w[0].1)
            .count();
        if decreasing > 0 {
            report.decreasing_steps += decreasing;
            report.warnings.push(format!(
                "region `{}` has {decreasing} decreasing cumulative steps",
                table.regions[i]
            ));
        }
        let mut at = Vec::with_capacity(boundaries.len());
        for d in &boundaries {
            let v = s.get(d).ok_or_else(|| Error::MissingDate {
                region: table.regions[i].to_string(),
                date: d.to_string(),
            })?;
            at.push(*v);
        }
        let c: Vec<u64> = at.iter().map(|v| v.0).collect();
        let dd: Vec<u64> = at.iter().map(|v| v.1).collect();
        let (sc, cc, k1) = difference_cumulative(&c);
        let (sd, cd, k2) = difference_cumulative(&dd);
        report.clamped_cells += k1 + k2;
        debug_assert_eq!(sc.len(), t);
        cases.push(cc);
        deaths.push(cd);
        signed_cases.push(sc);
        signed_deaths.push(sd);
    }
    if report.clamped_cells > 0 {
        report.warnings.push(format!(
            "clamped {} negative period counts to 0",
            report.clamped_cells
        ));
    }

    let panel = Panel::new(PanelParts {
        regions: table.regions.clone(),
        periods,
        cases,
        deaths,
        signed_cases: Some(signed_cases),
        signed_deaths: Some(signed_deaths),
        population: table.population.clone(),
        groups: table.groups.clone(),
        covariates: table.covariates.clone(),
    })?;
    Ok((panel, report))
}

/// Inverse of [`build_panel`] for monotone data: cumulative rows at every
/// boundary date.
pub fn cumulative_rows(panel: &Panel, grid: PeriodGrid) -> Result<Vec<CumulativeRow>> {
    let boundaries = grid.boundaries()?;
    if boundaries.len() != panel.n_periods() + 1 {
        return Err(Error::InvalidData("grid does not match panel periods".into()));
    }
    let mut rows = Vec::with_capacity(panel.n_regions() * boundaries.len());
    for (i, region) in panel.regions().iter().enumerate() {
        let (mut c, mut d) = (0u64, 0u64);
        for (k, date) in boundaries.iter().enumerate() {
            if k > 0 {
                c += panel.cases()[i][k - 1];
                d += panel.deaths()[i][k - 1];
            }
            rows.push(CumulativeRow {
                region: region.clone(),
                date: *date,
                cum_cases: c,
                cum_deaths: d,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn r(s: &str) -> RegionId {
        RegionId::new(s).unwrap()
    }

    fn grid(n: usize) -> PeriodGrid {
        PeriodGrid {
            start: NaiveDate::from_ymd_opt(2020, 4, 1).unwrap(),
            length_days: 14,
            n_periods: n,
        }
    }

    fn table(ids: &[&str]) -> RegionTable {
        RegionTable {
            regions: ids.iter().map(|s| r(s)).collect(),
            groups: vec!["g".into(); ids.len()],
            population: vec![1000; ids.len()],
            covariates: vec![],
        }
    }

    fn rows_for(id: &str, g: PeriodGrid, cum: &[u64]) -> Vec<CumulativeRow> {
        g.boundaries()
            .unwrap()
            .into_iter()
            .zip(cum)
            .map(|(date, &c)| CumulativeRow {
                region: r(id),
                date,
                cum_cases: c,
                cum_deaths: 0,
            })
            .collect()
    }

    #[test]
    fn differencing_examples() {
        let (signed, clamped, k) = difference_cumulative(&[0, 3, 3, 10]);
        assert_eq!(clamped, vec![3, 0, 7]);
        assert_eq!(signed, vec![3, 0, 7]);
        assert_eq!(k, 0);
        let (signed, clamped, k) = difference_cumulative(&[5, 4]);
        assert_eq!(clamped, vec![0]);
        assert_eq!(signed, vec![-1]);
        assert_eq!(k, 1);
    }

    #[test]
    fn boundaries_start_the_day_before() {
        let b = grid(2).boundaries().unwrap();
        let d = |s| NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap();
        assert_eq!(b, vec![d("2020-03-31"), d("2020-04-14"), d("2020-04-28")]);
    }

    #[test]
    fn builds_panel_and_keeps_signed_rates() {
        let g = grid(3);
        let raw = rows_for("A", g, &[0, 3, 3, 10]);
        let (panel, rep) = build_panel(&raw, &table(&["A"]), g, UnknownRegionPolicy::Fail).unwrap();
        assert_eq!(panel.cases()[0], vec![3, 0, 7]);
        assert_eq!(rep.clamped_cells, 0);

        let g = grid(1);
        let raw = rows_for("A", g, &[5, 4]);
        let (panel, rep) = build_panel(&raw, &table(&["A"]), g, UnknownRegionPolicy::Fail).unwrap();
        assert_eq!(panel.cases()[0], vec![0]);
        assert_eq!(panel.signed_cases()[0], vec![-1]);
        assert_eq!(rep.clamped_cells, 1);
        assert_eq!(rep.decreasing_steps, 1);
        let rates = crate::exposure::period_rates(&panel).unwrap();
        assert!(rates[0][&r("A")] < 0.0);
    }

    #[test]
    fn missing_boundary_date_is_an_error() {
        let g = grid(2);
        let mut raw = rows_for("A", g, &[0, 1, 2]);
        raw.remove(1);
        match build_panel(&raw, &table(&["A"]), g, UnknownRegionPolicy::Fail) {
            Err(Error::MissingDate { region, date }) => {
                assert_eq!(region, "A");
                assert_eq!(date, "2020-04-14");
            }
            other => panic!("expected missing date, got {other:?}"),
        }
        // region present in the table but absent from the series
        assert!(build_panel(&raw, &table(&["A", "B"]), g, UnknownRegionPolicy::Fail).is_err());
    }

    #[test]
    fn unknown_series_region_policy() {
        let g = grid(1);
        let mut raw = rows_for("A", g, &[0, 1]);
        raw.extend(rows_for("Z", g, &[0, 1]));
        assert!(build_panel(&raw, &table(&["A"]), g, UnknownRegionPolicy::Fail).is_err());
        let (_, rep) = build_panel(&raw, &table(&["A"]), g, UnknownRegionPolicy::DropWarn).unwrap();
        assert_eq!(rep.dropped_regions, vec!["Z".to_string()]);
    }

    /// Naive oracle: for each region walk the raw rows, pick the value at each
    /// boundary by linear search, and difference.
    fn oracle(raw: &[CumulativeRow], ids: &[RegionId], bounds: &[NaiveDate]) -> Vec<Vec<i64>> {
        ids.iter()
            .map(|id| {
                let mut vals = Vec::new();
                for b in bounds {
                    for row in raw {
                        if &row.region == id && row.date == *b {
                            vals.push(row.cum_cases as i64);
                        }
                    }
                }
                (1..vals.len()).map(|k| vals[k] - vals[k - 1]).collect()
            })
            .collect()
    }

    #[test]
    fn random_walks_match_differencing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = grid(6);
        let ids: Vec<RegionId> = (0..10).map(|i| r(&format!("R{i}"))).collect();
        let bounds = g.boundaries().unwrap();
        let first = bounds[0];
        let last = *bounds.last().unwrap();
        let mut raw = Vec::new();
        for id in &ids {
            let mut c: i64 = rng.random_range(0..50);
            let mut day = first;
            while day <= last {
                // mostly increasing, occasional correction
                c = (c + rng.random_range(-3i64..12)).max(0);
                raw.push(CumulativeRow {
                    region: id.clone(),
                    date: day,
                    cum_cases: c as u64,
                    cum_deaths: 0,
                });
                day = day.succ_opt().unwrap();
            }
        }
        let ids_str: Vec<&str> = ids.iter().map(|i| i.as_str()).collect();
        let (panel, _) = build_panel(&raw, &table(&ids_str), g, UnknownRegionPolicy::Fail).unwrap();
        let expected = oracle(&raw, &ids, &bounds);
        for i in 0..ids.len() {
            assert_eq!(panel.signed_cases()[i], expected[i]);
            let clamped: Vec<u64> = expected[i].iter().map(|v| (*v).max(0) as u64).collect();
            assert_eq!(panel.cases()[i], clamped);
        }
    }

    #[test]
    fn clamped_sum_bounded_by_final_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let mut cum = vec![rng.random_range(0..20u64)];
            let monotone = rng.random_bool(0.5);
            for _ in 0..8 {
                let prev = *cum.last().unwrap() as i64;
                let step = if monotone {
                    rng.random_range(0..10)
                } else {
                    rng.random_range(-6..10)
                };
                cum.push((prev + step).max(0) as u64);
            }
            let (_, clamped, _) = difference_cumulative(&cum);
            let total: u64 = clamped.iter().sum();
            if monotone {
                assert_eq!(total, cum.last().unwrap() - cum[0]);
            } else {
                assert!(total + cum[0] >= *cum.last().unwrap());
            }
        }
    }

    #[test]
    fn cumulative_rows_invert_build_panel() {
        let g = grid(3);
        let mut raw = rows_for("A", g, &[1, 4, 9, 9]);
        raw.extend(rows_for("B", g, &[0, 0, 2, 3]));
        let (panel, _) = build_panel(&raw, &table(&["A", "B"]), g, UnknownRegionPolicy::Fail).unwrap();
        let back = cumulative_rows(&panel, g).unwrap();
        let (again, _) = build_panel(&back, &table(&["A", "B"]), g, UnknownRegionPolicy::Fail).unwrap();
        assert_eq!(panel, again);
    }
}
