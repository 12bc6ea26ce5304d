#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diffaudit::ingestion::GroundTruth;
use diffaudit::label::{ClassLabel, Diagnosis};
use diffaudit::quality::GrayImage;
use diffaudit::service::RatingRecord;

/// Difficult group: rows = truth, columns = consensus, class order
/// AK BCC BKL DF MEL NV SCC VASC. No image received a DF consensus.
pub const DIFFICULT: [[u64; 8]; 8] = [
    [2, 0, 0, 0, 7, 2, 5, 0],
    [6, 0, 0, 0, 0, 2, 5, 1],
    [3, 1, 1, 0, 10, 6, 0, 1],
    [0, 0, 0, 0, 0, 1, 0, 1],
    [5, 0, 2, 0, 31, 18, 1, 1],
    [2, 3, 0, 0, 13, 7, 1, 0],
    [4, 2, 0, 0, 3, 0, 2, 0],
    [0, 0, 0, 0, 0, 1, 0, 2],
];

/// Control group, same layout.
pub const CONTROL: [[u64; 8]; 8] = [
    [3, 0, 1, 0, 0, 1, 4, 1],
    [0, 5, 0, 0, 0, 1, 2, 0],
    [2, 0, 5, 0, 1, 1, 1, 0],
    [0, 0, 1, 5, 2, 0, 0, 0],
    [1, 0, 0, 0, 9, 0, 0, 0],
    [0, 0, 0, 0, 3, 7, 0, 0],
    [0, 1, 0, 0, 2, 0, 5, 0],
    [0, 0, 0, 0, 0, 0, 0, 10],
];

/// Published per-class values: (easy sensitivity, easy specificity,
/// difficult sensitivity, difficult specificity).
pub const PUBLISHED_CLASS_VALUES: [(f64, f64, f64, f64); 8] = [
    (0.3, 0.9531, 0.125, 0.8529),
    (0.625, 0.9848, 0.0, 0.9565),
    (0.5, 0.9687, 0.0454, 0.9846),
    (0.625, 1.0, 0.0, 1.0),
    (0.9, 0.875, 0.5344, 0.6489),
    (0.7, 0.9531, 0.2692, 0.7619),
    (0.625, 0.8939, 0.1818, 0.9148),
    (1.0, 0.9843, 0.6666, 0.9731),
];

pub const DIFFICULT_GROUP_SIZE: usize = 190;
pub const CONTROL_GROUP_SIZE: usize = 80;

pub const BASE_RATERS: [&str; 6] = ["derm1", "derm2", "derm3", "derm4", "derm5", "derm6"];
pub const SENIOR_SECOND_PASS: &str = "derm1#pass2";

pub struct RatingFixture {
    pub records: Vec<RatingRecord>,
    pub truth: GroundTruth,
    /// (group name, case ids)
    pub groups: Vec<(String, Vec<String>)>,
}

fn other_class(c: usize, shift: usize) -> ClassLabel {
    ClassLabel::from_index((c + 1 + shift % 7) % 8).unwrap()
}

/// Ratings from six raters plus the senior second pass whose consensus
/// reproduces `table` exactly, followed by `no_consensus` cases split
/// evenly between two labels. Votes vary by case so Fleiss' kappa sees a
/// realistic spread, and the senior rater revises some first-pass votes.
fn group_ratings(
    prefix: &str,
    table: &[[u64; 8]; 8],
    no_consensus: usize,
    records: &mut Vec<RatingRecord>,
    truth: &mut GroundTruth,
) -> Vec<String> {
    let mut cases = Vec::new();
    let mut n = 0usize;
    let t0 = Utc.with_ymd_and_hms(2024, 3, 1, 9, 0, 0).unwrap();
    let vote = |case: &str, rater: &str, d: Diagnosis, revision: u32, k: usize| RatingRecord {
        rater_id: rater.to_string(),
        case_id: case.to_string(),
        diagnosis: d,
        comment: (d == Diagnosis::Other).then(|| "uncertain".to_string()),
        revision,
        timestamp: t0 + chrono::Duration::seconds(k as i64),
    };
    let mut push_case = |t: ClassLabel, votes: Vec<Diagnosis>, n: usize| {
        let id = format!("{prefix}-{n:04}");
        truth.insert(id.clone(), t).unwrap();
        let base = records.len();
        for (r, d) in votes.iter().enumerate() {
            let rater = if r < BASE_RATERS.len() { BASE_RATERS[r] } else { SENIOR_SECOND_PASS };
            if r == 1 && n % 5 == 0 {
                // A superseded first answer that must not count.
                records.push(vote(&id, rater, Diagnosis::Class(t), 0, base + r));
                records.push(vote(&id, rater, *d, 1, base + r + 100));
            } else {
                records.push(vote(&id, rater, *d, 0, base + r));
            }
        }
        cases.push(id);
    };
    for (t, row) in table.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            for _ in 0..count {
                let cl = Diagnosis::Class(ClassLabel::from_index(c).unwrap());
                let alt = Diagnosis::Class(other_class(c, n));
                let alt2 = Diagnosis::Class(other_class(c, n + 3));
                let votes = match n % 3 {
                    // 4 of 6 valid with the second pass
                    0 => vec![cl, cl, alt, alt2, Diagnosis::Other, cl, cl],
                    // 4 of 6, no second pass
                    1 => vec![cl, alt, cl, cl, alt, cl],
                    // 5 of 5 valid
                    _ => vec![cl, cl, cl, Diagnosis::Other, cl, cl],
                };
                push_case(ClassLabel::from_index(t).unwrap(), votes, n);
                n += 1;
            }
        }
    }
    for i in 0..no_consensus {
        let t = ClassLabel::from_index(i % 8).unwrap();
        let a = Diagnosis::Class(ClassLabel::from_index((i + 4) % 8).unwrap());
        let b = Diagnosis::Class(ClassLabel::from_index((i + 5) % 8).unwrap());
        // 3 vs 3 after the tie-break vote: still no strict majority.
        let votes = vec![a, b, a, Diagnosis::Other, b, a, b];
        push_case(t, votes, n);
        n += 1;
    }
    cases
}

pub fn published_ratings() -> RatingFixture {
    let mut records = Vec::new();
    let mut truth = GroundTruth::new();
    let hard_total: u64 = DIFFICULT.iter().flatten().sum();
    let easy_total: u64 = CONTROL.iter().flatten().sum();
    let hard = group_ratings(
        "h",
        &DIFFICULT,
        DIFFICULT_GROUP_SIZE - hard_total as usize,
        &mut records,
        &mut truth,
    );
    let easy = group_ratings(
        "e",
        &CONTROL,
        CONTROL_GROUP_SIZE - easy_total as usize,
        &mut records,
        &mut truth,
    );
    RatingFixture {
        records,
        truth,
        groups: vec![("difficult".into(), hard), ("control".into(), easy)],
    }
}

pub fn write_truth_csv(truth: &GroundTruth, path: &Path) {
    let mut s = String::from("image,label\n");
    for (id, l) in truth.iter() {
        s.push_str(&format!("{id},{l}\n"));
    }
    std::fs::write(path, s).unwrap();
}

pub fn write_groups_csv(groups: &[(String, Vec<String>)], path: &Path) {
    let mut s = String::from("image,group\n");
    for (g, ids) in groups {
        for id in ids {
            s.push_str(&format!("{id},{g}\n"));
        }
    }
    std::fs::write(path, s).unwrap();
}

pub fn write_ratings_jsonl(records: &[RatingRecord], path: &Path) {
    let f = std::fs::File::create(path).unwrap();
    diffaudit::ingestion::write_ratings(records, f).unwrap();
}

/// High-contrast scene of large rectangles and discs with a mild texture,
/// so edges survive a σ = 4 blur.
pub fn scene(seed: u64, w: usize, h: usize) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = vec![if seed % 2 == 0 { 15.0 } else { 240.0 }; w * h];
    for _ in 0..rng.random_range(4..8) {
        let v = if rng.random_bool(0.5) { 15.0 } else { 240.0 };
        let (cx, cy) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
        let r = rng.random_range(w as f64 / 10.0..w as f64 / 3.0);
        let disc = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disc {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= r * 0.6
                };
                if inside {
                    px[y * w + x] = v;
                }
            }
        }
    }
    let texture: Vec<f64> = (0..w * h).map(|_| rng.random_range(-6.0..6.0)).collect();
    for (p, t) in px.iter_mut().zip(texture) {
        *p = (*p + t).clamp(0.0, 255.0);
    }
    GrayImage::new(w, h, px).unwrap()
}

pub fn save_png(g: &GrayImage, path: &Path) {
    let buf = image::GrayImage::from_fn(g.width() as u32, g.height() as u32, |x, y| {
        image::Luma([g.get(x as usize, y as usize).round().clamp(0.0, 255.0) as u8])
    });
    buf.save(path).unwrap();
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_diffaudit")
}

/// Writes a study with `n_cases` PNG cases and the given raters.
pub struct Study {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub log: PathBuf,
    pub cases: Vec<String>,
    pub raters: Vec<(String, String)>,
    pub admin: String,
    pub second_pass_token: String,
}

pub fn make_study(n_cases: usize, n_raters: usize) -> Study {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("images")).unwrap();
    let sites = ["torso", "head/neck", "lower extremity", "upper extremity", "palms/soles"];
    let mut toml = String::from(
        "admin_token = \"admin-token\"\nlog_path = \"ratings.jsonl\"\nsenior_rater_id = \"rater0\"\nsenior_second_pass_token = \"senior-pass2\"\n\n",
    );
    let mut raters = Vec::new();
    for r in 0..n_raters {
        let (id, token) = (format!("rater{r}"), format!("token-{r}-x9"));
        toml.push_str(&format!("[[raters]]\nid = \"{id}\"\ntoken = \"{token}\"\n\n"));
        raters.push((id, token));
    }
    let mut cases = Vec::new();
    for c in 0..n_cases {
        let id = format!("case{c:03}");
        let rel = format!("images/{id}.png");
        save_png(&scene(c as u64, 32, 32), &dir.path().join(&rel));
        toml.push_str(&format!("[[cases]]\nid = \"{id}\"\nimage = \"{rel}\"\n"));
        if c % 4 != 3 {
            toml.push_str(&format!(
                "age = {}\nsex = \"{}\"\nsite = \"{}\"\n",
                20 + (c * 7) % 60,
                if c % 2 == 0 { "male" } else { "female" },
                sites[c % sites.len()]
            ));
        }
        toml.push_str(&format!("batch = \"b{}\"\n\n", c % 3));
        cases.push(id);
    }
    let config = dir.path().join("study.toml");
    std::fs::write(&config, toml).unwrap();
    Study {
        log: dir.path().join("ratings.jsonl"),
        config,
        dir,
        cases,
        raters,
        admin: "admin-token".into(),
        second_pass_token: "senior-pass2".into(),
    }
}

/// A running `serve` process and its base URL.
pub struct Server {
    pub child: Child,
    pub base: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub fn spawn_server(config: &Path) -> Server {
    let mut child = Command::new(bin())
        .args(["serve", "--config"])
        .arg(config)
        .args(["--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let addr = line
        .split_whitespace()
        .find(|w| w.starts_with("http://"))
        .unwrap_or_else(|| panic!("no address in readiness line {line:?}"))
        .to_string();
    Server { child, base: addr }
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(20))
        .build()
        .unwrap()
}
