//! The 1854 Soho cholera deaths, shipped in meters.
//!
//! Coordinates are the digitised map units scaled by 100. No census of the
//! period is bundled, so the population offset is a kernel density estimate
//! over points placed every 10 m along the mapped streets, each weighted by
//! the street length it represents, rescaled to 21,345 residents.

use crate::data_io::{parse_points_csv, parse_weighted_csv, PointPattern, WeightedPoint};
use crate::error::{Error, Result};
use crate::geom::{Point, Rect};

const DEATHS_CSV: &str = include_str!("../data/snow/deaths.csv");
const PUMPS_CSV: &str = include_str!("../data/snow/pumps.csv");
const POPULATION_CSV: &str = include_str!("../data/snow/population.csv");

pub const TOTAL_POPULATION: f64 = 21_345.0;
pub const N_DEATHS: usize = 578;
pub const BROAD_ST_PUMP: usize = 7;

pub fn domain() -> Rect {
    Rect::square(200.0, 2200.0)
}

pub fn deaths() -> Result<PointPattern> {
    PointPattern::new(parse_points_csv(DEATHS_CSV.as_bytes())?, domain(), "snow-deaths")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pump {
    pub id: usize,
    pub label: String,
    pub location: Point,
}

pub fn pumps() -> Result<Vec<Pump>> {
    let mut rdr = csv::Reader::from_reader(PUMPS_CSV.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad pump record {rec:?}")))
        };
        out.push(Pump {
            id: num(0)? as usize,
            label: rec.get(1).unwrap_or_default().to_string(),
            location: Point::new(num(2)?, num(3)?),
        });
    }
    Ok(out)
}

pub fn broad_st_pump() -> Result<Point> {
    pumps()?
        .into_iter()
        .find(|p| p.id == BROAD_ST_PUMP)
        .map(|p| p.location)
        .ok_or_else(|| Error::Config("pump table lacks the Broad St pump".into()))
}

/// Street-sampled population points used for the offset KDE.
pub fn population_points() -> Result<Vec<WeightedPoint>> {
    parse_weighted_csv(POPULATION_CSV.as_bytes())
}
