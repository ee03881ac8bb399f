//! Reference answers computed the slow, obvious way.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tadtr_core::eval::{ScoredDetection, VideoAnnotation, VideoDetections};
use tadtr_core::matching::GroundTruthAction;
use tadtr_core::{Scalar, Segment, Tensor};

use super::rng;

/// Minimum total over every injective map rows → columns, by enumeration.
pub fn brute_force(cost: &Tensor) -> Scalar {
    fn go(cost: &Tensor, row: usize, used: &mut Vec<bool>, acc: Scalar, best: &mut Scalar) {
        if row == cost.rows() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.cols() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost.row(row)[c], best);
                used[c] = false;
            }
        }
    }
    let mut best = Scalar::INFINITY;
    go(cost, 0, &mut vec![false; cost.cols()], 0.0, &mut best);
    best
}

/// Entries are multiples of 1/64 in [-8, 8), so every partial sum is exact
/// and the optimum compares with `==` whatever the summation order.
pub fn dyadic_matrix(r: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| r.gen_range(-512..512) as Scalar / 64.0)
        .collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

/// Hand-enumerated evaluation fixture and its expected values.
pub struct Golden {
    pub thresholds: Vec<Scalar>,
    pub classes: usize,
    pub annotations: Vec<VideoAnnotation>,
    pub predictions: Vec<VideoDetections>,
    /// (threshold, class, AP)
    pub ap: Vec<(Scalar, usize, Scalar)>,
    pub map: Vec<(Scalar, Scalar)>,
    pub avg: Scalar,
}

fn fraction(text: &str) -> Scalar {
    match text.split_once('/') {
        Some((n, d)) => n.parse::<Scalar>().unwrap() / d.parse::<Scalar>().unwrap(),
        None => text.parse().unwrap(),
    }
}

fn video<'a, T>(list: &'a mut Vec<T>, id: &str, make: impl Fn(String) -> T, key: impl Fn(&T) -> &str) -> &'a mut T {
    let pos = match list.iter().position(|v| key(v) == id) {
        Some(p) => p,
        None => {
            list.push(make(id.to_string()));
            list.len() - 1
        }
    };
    &mut list[pos]
}

pub fn load_golden() -> Golden {
    let text = include_str!("../golden/eval_three_videos.txt");
    let mut g = Golden {
        thresholds: Vec::new(),
        classes: 0,
        annotations: Vec::new(),
        predictions: Vec::new(),
        ap: Vec::new(),
        map: Vec::new(),
        avg: Scalar::NAN,
    };
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let f: Vec<&str> = line.split_whitespace().collect();
        let num = |i: usize| f[i].parse::<Scalar>().unwrap();
        match f[0] {
            "thresholds" => g.thresholds = f[1..].iter().map(|v| v.parse().unwrap()).collect(),
            "classes" => g.classes = f[1].parse().unwrap(),
            "gt" => video(
                &mut g.annotations,
                f[1],
                |id| VideoAnnotation {
                    video_id: id,
                    actions: Vec::new(),
                },
                |v| &v.video_id,
            )
            .actions
            .push(GroundTruthAction {
                label: f[2].parse().unwrap(),
                segment: Segment::from_interval(num(3), num(4)),
            }),
            "det" => video(
                &mut g.predictions,
                f[1],
                |id| VideoDetections {
                    video_id: id,
                    detections: Vec::new(),
                },
                |v| &v.video_id,
            )
            .detections
            .push(ScoredDetection {
                label: f[2].parse().unwrap(),
                segment: Segment::from_interval(num(3), num(4)),
                score: num(5),
            }),
            "ap" => g.ap.push((num(1), f[2].parse().unwrap(), fraction(f[3]))),
            "map" => g.map.push((num(1), fraction(f[2]))),
            "avg" => g.avg = fraction(f[1]),
            other => panic!("unknown golden record {other}"),
        }
    }
    g
}

/// Random benchmark: up to four videos with up to 3 truths and 6 detections
/// each, two classes. Scores are distinct.
pub fn random_eval_case(seed: u64) -> (Vec<VideoDetections>, Vec<VideoAnnotation>) {
    let mut r = rng(seed);
    let videos = r.gen_range(1..5);
    let mut score_pool: Vec<Scalar> = (0..videos * 6)
        .map(|i| (i as Scalar + 1.0) / (videos * 6 + 1) as Scalar)
        .collect();
    let mut anns = Vec::new();
    let mut preds = Vec::new();
    let seg = |r: &mut ChaCha8Rng| {
        let s: Scalar = r.gen_range(0.0..0.8);
        Segment::from_interval(s, s + r.gen_range(0.05..0.2))
    };
    for v in 0..videos {
        let id = format!("v{v}");
        let actions = (0..r.gen_range(0..4))
            .map(|_| GroundTruthAction {
                label: r.gen_range(0..2),
                segment: seg(&mut r),
            })
            .collect::<Vec<_>>();
        let mut dets = Vec::new();
        for _ in 0..r.gen_range(0..7) {
            let idx = r.gen_range(0..score_pool.len());
            let score = score_pool.swap_remove(idx);
            // Half the detections jitter a truth, half land anywhere.
            let segment = match actions.get(r.gen_range(0..actions.len().max(1) * 2)) {
                Some(a) => {
                    let d = r.gen_range(-0.05..0.05);
                    Segment::new(a.segment.center + d, a.segment.length * r.gen_range(0.7..1.3))
                }
                None => seg(&mut r),
            };
            dets.push(ScoredDetection {
                label: r.gen_range(0..2),
                segment,
                score,
            });
        }
        anns.push(VideoAnnotation {
            video_id: id.clone(),
            actions,
        });
        preds.push(VideoDetections {
            video_id: id,
            detections: dets,
        });
    }
    (preds, anns)
}

/// Coefficient of determination of a least-squares polynomial fit.
pub fn r_squared(xs: &[f64], ys: &[f64], degree: usize) -> f64 {
    let n = degree + 1;
    // Normal equations, solved by Gaussian elimination.
    let mut a = vec![vec![0.0; n + 1]; n];
    for (&x, &y) in xs.iter().zip(ys) {
        for i in 0..n {
            for j in 0..n {
                a[i][j] += x.powi((i + j) as i32);
            }
            a[i][n] += y * x.powi(i as i32);
        }
    }
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..=n {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let coef: Vec<f64> = (0..n).map(|i| a[i][n] / a[i][i]).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let fit: f64 = coef.iter().enumerate().map(|(i, c)| c * x.powi(i as i32)).sum();
        ss_res += (y - fit).powi(2);
        ss_tot += (y - mean).powi(2);
    }
    1.0 - ss_res / ss_tot
}
