//! CSV and JSON-lines encodings of result and summary tables.
//!
//! Floats are printed with 9 significant digits (`%.9g` style). Missing
//! values are written as `NaN` for floats and as an empty field for the
//! optional timing column.

use std::io::{Read, Write};

use serde_json::{json, Value};

use crate::experiments::{ExperimentError, ResultRow, SummaryRow};

pub const RESULT_HEADER: [&str; 9] = [
    "seed",
    "scheme",
    "attacker_count",
    "flip_prob",
    "participant_id",
    "is_attacker",
    "mean_score",
    "final_global_accuracy",
    "wall_time_ms",
];

pub const SUMMARY_HEADER: [&str; 9] = [
    "scheme",
    "attacker_count",
    "flip_prob",
    "seeds",
    "honest_mean",
    "attacker_mean",
    "separation",
    "normalized_separation",
    "final_accuracy_mean",
];

/// Format like C's `%.9g`.
pub fn fmt_sig9(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let m = trim_zeros(mantissa);
        return format!("{m}e{exp}");
    }
    trim_zeros(&format!("{:.*}", (8 - exp) as usize, x)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    fmt_sig9(x.unwrap_or(f64::NAN))
}

/// Round-trip a float through its printed form, so the JSON mirror carries
/// the same values as the CSV.
fn printed(x: f64) -> Value {
    if x.is_finite() {
        json!(fmt_sig9(x).parse::<f64>().expect("printed float parses"))
    } else {
        Value::Null
    }
}

pub fn write_results_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RESULT_HEADER)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.scheme.to_string(),
            r.attacker_count.to_string(),
            fmt_sig9(r.flip_prob),
            r.participant_id.to_string(),
            r.is_attacker.to_string(),
            fmt_sig9(r.mean_score),
            fmt_sig9(r.final_global_accuracy),
            r.wall_time_ms.map(|t| t.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv<R: Read>(input: R) -> Result<Vec<ResultRow>, ExperimentError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != RESULT_HEADER {
        return Err(ExperimentError::InvalidConfig(format!(
            "unexpected result header {header:?}"
        )));
    }
    Ok(r.deserialize().collect::<Result<Vec<ResultRow>, _>>()?)
}

pub fn write_results_jsonl<W: Write>(rows: &[ResultRow], mut out: W) -> Result<(), ExperimentError> {
    for r in rows {
        let line = json!({
            "seed": r.seed,
            "scheme": r.scheme,
            "attacker_count": r.attacker_count,
            "flip_prob": printed(r.flip_prob),
            "participant_id": r.participant_id,
            "is_attacker": r.is_attacker,
            "mean_score": printed(r.mean_score),
            "final_global_accuracy": printed(r.final_global_accuracy),
            "wall_time_ms": r.wall_time_ms,
        });
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<(), ExperimentError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for s in rows {
        w.write_record([
            s.scheme.to_string(),
            s.attacker_count.to_string(),
            fmt_sig9(s.flip_prob),
            s.seeds.to_string(),
            fmt_opt(s.honest_mean),
            fmt_opt(s.attacker_mean),
            fmt_opt(s.separation),
            fmt_opt(s.normalized_separation),
            fmt_sig9(s.final_accuracy_mean),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contribution::Scheme;

    #[test]
    fn sig9_formatting() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(0.8125), "0.8125");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(-2.0 / 3.0), "-0.666666667");
        assert_eq!(fmt_sig9(6000.0), "6000");
        assert_eq!(fmt_sig9(123456789.4), "123456789");
        assert_eq!(fmt_sig9(1234567894.0), "1.23456789e9");
        assert_eq!(fmt_sig9(0.0001), "0.0001");
        assert_eq!(fmt_sig9(0.00001), "1e-5");
        assert_eq!(fmt_sig9(9.9999999996), "10");
        assert_eq!(fmt_sig9(f64::NAN), "NaN");
    }

    #[test]
    fn results_csv_reads_back() {
        let rows = vec![
            ResultRow {
                seed: 3,
                scheme: Scheme::ShapleyExact,
                attacker_count: 1,
                flip_prob: 0.3,
                participant_id: 1,
                is_attacker: true,
                mean_score: -0.0125,
                final_global_accuracy: 0.9,
                wall_time_ms: None,
            },
            ResultRow {
                seed: 3,
                scheme: Scheme::Reputation,
                attacker_count: 1,
                flip_prob: 0.3,
                participant_id: 2,
                is_attacker: false,
                mean_score: 0.6,
                final_global_accuracy: 0.9,
                wall_time_ms: Some(12),
            },
        ];
        let mut buf = Vec::new();
        write_results_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "seed,scheme,attacker_count,flip_prob,participant_id,is_attacker,mean_score,final_global_accuracy,wall_time_ms\n"
        ));
        assert!(text.contains("3,shapley_exact,1,0.3,1,true,-0.0125,0.9,\n"));
        assert_eq!(read_results_csv(buf.as_slice()).unwrap(), rows);

        let mut jl = Vec::new();
        write_results_jsonl(&rows, &mut jl).unwrap();
        let first: Value = serde_json::from_str(String::from_utf8(jl).unwrap().lines().next().unwrap()).unwrap();
        assert_eq!(first["scheme"], "shapley_exact");
        assert_eq!(first["mean_score"], -0.0125);
        assert_eq!(first["wall_time_ms"], Value::Null);
    }

    #[test]
    fn wrong_header_is_rejected() {
        let bad = "a,b\n1,2\n";
        assert!(read_results_csv(bad.as_bytes()).is_err());
    }
}
