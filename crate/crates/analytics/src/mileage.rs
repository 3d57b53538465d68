//! Daily, monthly and month-versus-month mileage and fuel.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, FixedOffset, NaiveDate};
use radfleet_core::wire::TelemetryRecord;
use serde::{Deserialize, Serialize};

use crate::fuel::fuel_consumption;
use crate::{path_km, valid_sorted, AnalyticsError};

/// Fleet-local day boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FleetCalendar {
    pub offset: FixedOffset,
}

impl Default for FleetCalendar {
    /// UTC+03:30.
    fn default() -> Self {
        FleetCalendar {
            offset: FixedOffset::east_opt(3 * 3600 + 1800).unwrap(),
        }
    }
}

impl FleetCalendar {
    pub fn from_offset_minutes(minutes: i32) -> Option<Self> {
        FixedOffset::east_opt(minutes * 60).map(|offset| FleetCalendar { offset })
    }

    pub fn local_date(&self, timestamp_ms: u64) -> NaiveDate {
        DateTime::from_timestamp_millis(timestamp_ms as i64)
            .unwrap_or_default()
            .with_timezone(&self.offset)
            .date_naive()
    }

    /// First instant of `date` in fleet-local time, as UTC milliseconds.
    pub fn day_start_ms(&self, date: NaiveDate) -> i64 {
        date.and_hms_opt(0, 0, 0)
            .unwrap()
            .and_local_timezone(self.offset)
            .unwrap()
            .timestamp_millis()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self, AnalyticsError> {
        if NaiveDate::from_ymd_opt(year, month, 1).is_some() {
            Ok(YearMonth { year, month })
        } else {
            Err(AnalyticsError::BadMonth(format!("{year}-{month}")))
        }
    }

    pub fn of(date: NaiveDate) -> Self {
        YearMonth {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).unwrap()
    }

    pub fn next(self) -> Self {
        if self.month == 12 {
            YearMonth { year: self.year + 1, month: 1 }
        } else {
            YearMonth { year: self.year, month: self.month + 1 }
        }
    }

    pub fn days(self) -> u32 {
        (self.next().first_day() - self.first_day()).num_days() as u32
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || AnalyticsError::BadMonth(s.to_string());
        let (y, m) = s.split_once('-').ok_or_else(bad)?;
        YearMonth::new(y.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?).map_err(|_| bad())
    }
}

impl TryFrom<String> for YearMonth {
    type Error = AnalyticsError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<YearMonth> for String {
    fn from(m: YearMonth) -> String {
        m.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DayRow {
    pub day: u32,
    pub date: NaiveDate,
    pub km: f64,
    pub liters: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonthRow {
    pub month: YearMonth,
    pub km: f64,
    pub liters: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub day: u32,
    pub km_a: f64,
    pub km_b: f64,
    pub liters_a: f64,
    pub liters_b: f64,
}

/// One row per calendar day of `month`. A day's km is the path length of that local day's
/// valid-fix records; its liters come from all of that day's records. Days without data are 0.
pub fn daily_mileage(
    records: &[TelemetryRecord],
    month: YearMonth,
    calendar: &FleetCalendar,
    tank_capacity_l: f64,
) -> Vec<DayRow> {
    let days = month.days();
    let mut buckets: Vec<Vec<TelemetryRecord>> = vec![Vec::new(); days as usize];
    for r in records {
        let date = calendar.local_date(r.timestamp_ms);
        if YearMonth::of(date) == month {
            buckets[date.day0() as usize].push(*r);
        }
    }
    buckets
        .iter()
        .enumerate()
        .map(|(i, day)| DayRow {
            day: i as u32 + 1,
            date: month.first_day() + chrono::Days::new(i as u64),
            km: path_km(&valid_sorted(day)),
            liters: fuel_consumption(day, tank_capacity_l).map_or(0.0, |f| f.liters),
        })
        .collect()
}

/// One row per month in `from..=to`, each the sum of that month's daily rows.
pub fn monthly_report(
    records: &[TelemetryRecord],
    from: YearMonth,
    to: YearMonth,
    calendar: &FleetCalendar,
    tank_capacity_l: f64,
) -> Vec<MonthRow> {
    let mut out = Vec::new();
    let mut m = from;
    while m <= to {
        let days = daily_mileage(records, m, calendar, tank_capacity_l);
        out.push(MonthRow {
            month: m,
            km: days.iter().map(|d| d.km).sum(),
            liters: days.iter().map(|d| d.liters).sum(),
        });
        m = m.next();
    }
    out
}

/// Two months aligned by day of month; the shorter month reports 0 past its end.
pub fn compare_months(
    records: &[TelemetryRecord],
    a: YearMonth,
    b: YearMonth,
    calendar: &FleetCalendar,
    tank_capacity_l: f64,
) -> Vec<CompareRow> {
    let da = daily_mileage(records, a, calendar, tank_capacity_l);
    let db = daily_mileage(records, b, calendar, tank_capacity_l);
    let n = da.len().max(db.len());
    (0..n)
        .map(|i| CompareRow {
            day: i as u32 + 1,
            km_a: da.get(i).map_or(0.0, |d| d.km),
            km_b: db.get(i).map_or(0.0, |d| d.km),
            liters_a: da.get(i).map_or(0.0, |d| d.liters),
            liters_b: db.get(i).map_or(0.0, |d| d.liters),
        })
        .collect()
}
