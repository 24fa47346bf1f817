//! Shared test support: a straight-line dense reference implementation,
//! random case generation, and a minimal XML well-formedness checker.
#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphpool::autodiff::Tensor;
use graphpool::graph::SparseMatrix;

pub mod checks;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mat(t: &Tensor) -> Mat {
    t.to_rows()
}

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k) = (a.len(), b.len());
    let m = b.first().map_or(0, Vec::len);
    let mut out = zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    let c = a.first().map_or(0, Vec::len);
    (0..c).map(|j| a.iter().map(|row| row[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter()
        .map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn relu(a: &Mat) -> Mat {
    a.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

pub fn hcat(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().chain(y).copied().collect())
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len(), "column count");
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}

pub fn degrees(a: &Mat) -> Vec<f64> {
    a.iter().map(|r| r.iter().sum()).collect()
}

/// `D̂^-1/2 (A + I) D̂^-1/2`.
pub fn gcn_norm(a: &Mat) -> Mat {
    let n = a.len();
    let mut h = a.clone();
    for (i, row) in h.iter_mut().enumerate() {
        row[i] += 1.0;
    }
    let d = degrees(&h);
    let mut out = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[i][j] = h[i][j] / (d[i].sqrt() * d[j].sqrt());
        }
    }
    out
}

/// `D^-1/2 A D^-1/2`, zero rows and columns at isolated nodes.
pub fn tagcn_norm(a: &Mat) -> Mat {
    let n = a.len();
    let d = degrees(a);
    let mut out = zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if d[i] > 0.0 && d[j] > 0.0 {
                out[i][j] = a[i][j] / (d[i].sqrt() * d[j].sqrt());
            }
        }
    }
    out
}

/// `D^-1 A`, zero rows at isolated nodes.
pub fn mean_norm(a: &Mat) -> Mat {
    let d = degrees(a);
    a.iter()
        .zip(&d)
        .map(|(r, &di)| r.iter().map(|v| if di > 0.0 { v / di } else { 0.0 }).collect())
        .collect()
}

pub fn gcn_layer(a: &Mat, x: &Mat, w: &Mat, b: &[f64], act: bool) -> Mat {
    let y = add_row(&mm(&mm(&gcn_norm(a), x), w), b);
    if act {
        relu(&y)
    } else {
        y
    }
}

pub fn sage_layer(a: &Mat, x: &Mat, w: &Mat, b: &[f64], act: bool) -> Mat {
    let y = add_row(&mm(&hcat(x, &mm(&mean_norm(a), x)), w), b);
    if act {
        relu(&y)
    } else {
        y
    }
}

pub fn tagcn_layer(a: &Mat, x: &Mat, ws: &[Mat], b: &[f64], act: bool) -> Mat {
    let s = tagcn_norm(a);
    let mut power = x.clone();
    let mut y = mm(&power, &ws[0]);
    for w in &ws[1..] {
        power = mm(&s, &power);
        y = add(&y, &mm(&power, w));
    }
    let y = add_row(&y, b);
    if act {
        relu(&y)
    } else {
        y
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    x.iter()
        .map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Indices of the `k` largest scores, lower index first on ties, returned ascending.
pub fn topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    let mut kept = idx[..k].to_vec();
    kept.sort_unstable();
    kept
}

/// `(X ⊙ tanh(y))[idx]` and `A[idx, idx]`.
pub fn gated_select(a: &Mat, x: &Mat, y: &[f64], k: usize) -> (Vec<usize>, Mat, Mat) {
    let idx = topk(y, k);
    let xs = idx
        .iter()
        .map(|&i| x[i].iter().map(|v| v * y[i].tanh()).collect())
        .collect();
    let aa = idx.iter().map(|&i| idx.iter().map(|&j| a[i][j]).collect()).collect();
    (idx, xs, aa)
}

pub fn topk_pool(a: &Mat, x: &Mat, p: &[f64], k: usize) -> (Vec<usize>, Mat, Mat) {
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    let y: Vec<f64> = x
        .iter()
        .map(|r| r.iter().zip(p).map(|(u, v)| u * v).sum::<f64>() / norm)
        .collect();
    gated_select(a, x, &y, k)
}

pub fn sag_pool(a: &Mat, x: &Mat, w: &Mat, b: f64, k: usize) -> (Vec<usize>, Mat, Mat) {
    let y: Vec<f64> = gcn_layer(a, x, w, &[b], false).iter().map(|r| r[0]).collect();
    gated_select(a, x, &y, k)
}

/// `(S, SᵀZ, SᵀAS)` with `Z` from the embedding SAGE (relu) and `S` from
/// the softmax of the assignment SAGE restricted to `m` columns.
#[allow(clippy::too_many_arguments)]
pub fn diff_pool(a: &Mat, x: &Mat, we: &Mat, be: &[f64], wa: &Mat, ba: &[f64], m: usize) -> (Mat, Mat, Mat) {
    let z = sage_layer(a, x, we, be, true);
    let logits = sage_layer(a, x, wa, ba, false);
    let s = softmax_rows(&logits.iter().map(|r| r[..m].to_vec()).collect());
    let st = transpose(&s);
    (s.clone(), mm(&st, &z), mm(&mm(&st, a), &s))
}

/// Rows ordered by the last column descending, ties by earlier columns
/// right to left, then by index; truncated or zero-padded to `k`.
pub fn sort_pool(x: &Mat, k: usize) -> Mat {
    let c = x.first().map_or(0, Vec::len);
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| {
        for col in (0..c).rev() {
            let o = x[j][col].partial_cmp(&x[i][col]).unwrap();
            if o != std::cmp::Ordering::Equal {
                return o;
            }
        }
        i.cmp(&j)
    });
    (0..k)
        .map(|r| idx.get(r).map_or_else(|| vec![0.0; c], |&i| x[i].clone()))
        .collect()
}

pub fn mean_rows(x: &Mat) -> Vec<f64> {
    let c = x.first().map_or(0, Vec::len);
    let n = x.len() as f64;
    (0..c).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect()
}

/// Random simple undirected graph with `n` nodes and edge probability `p`.
pub fn random_edges<R: Rng>(rng: &mut R, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    edges
}

pub fn random_graph<R: Rng>(rng: &mut R, max_n: usize) -> SparseMatrix {
    let n = rng.gen_range(1..=max_n);
    let p = rng.gen_range(0.2..0.8);
    SparseMatrix::from_undirected_edges(n, &random_edges(rng, n, p)).unwrap()
}

pub fn random_matrix<R: Rng>(rng: &mut R, r: usize, c: usize) -> Tensor {
    Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_permutation<R: Rng>(rng: &mut R, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Checks that `text` is one well-formed XML element tree: tags balance,
/// attributes are quoted and unique, and no stray `<` or `&` appears.
pub fn check_xml(text: &str) -> Result<(), String> {
    let mut stack: Vec<String> = Vec::new();
    let mut roots = 0;
    let mut rest = text.trim();
    if let Some(decl_end) = rest.strip_prefix("<?xml").and_then(|r| r.find("?>")) {
        rest = rest[5 + decl_end + 2..].trim_start();
    }
    while !rest.is_empty() {
        if let Some(tail) = rest.strip_prefix('<') {
            let end = tail.find('>').ok_or("unterminated tag")?;
            let tag = &tail[..end];
            rest = &tail[end + 1..];
            if let Some(name) = tag.strip_prefix('/') {
                let open = stack.pop().ok_or_else(|| format!("unmatched </{name}>"))?;
                if open != name.trim() {
                    return Err(format!("</{name}> closes <{open}>"));
                }
                continue;
            }
            let self_closing = tag.ends_with('/');
            let body = tag.trim_end_matches('/');
            let mut parts = body.splitn(2, char::is_whitespace);
            let name = parts.next().unwrap_or("");
            if name.is_empty()
                || !name
                    .chars()
                    .all(|c| c.is_alphanumeric() || c == '-' || c == ':' || c == '_')
            {
                return Err(format!("bad tag name {name:?}"));
            }
            check_attributes(parts.next().unwrap_or(""))?;
            if stack.is_empty() {
                roots += 1;
            }
            if !self_closing {
                stack.push(name.to_string());
            }
        } else {
            let end = rest.find('<').unwrap_or(rest.len());
            let chars = &rest[..end];
            if stack.is_empty() && !chars.trim().is_empty() {
                return Err("text outside the root element".into());
            }
            check_text(chars)?;
            rest = &rest[end..];
        }
    }
    if let Some(open) = stack.pop() {
        return Err(format!("<{open}> never closed"));
    }
    if roots != 1 {
        return Err(format!("{roots} root elements"));
    }
    Ok(())
}

fn check_text(s: &str) -> Result<(), String> {
    let mut rest = s;
    while let Some(i) = rest.find('&') {
        let tail = &rest[i + 1..];
        let semi = tail.find(';').ok_or("bare &")?;
        let ent = &tail[..semi];
        let ok = matches!(ent, "amp" | "lt" | "gt" | "quot" | "apos") || ent.starts_with('#');
        if !ok {
            return Err(format!("unknown entity &{ent};"));
        }
        rest = &tail[semi + 1..];
    }
    Ok(())
}

fn check_attributes(s: &str) -> Result<(), String> {
    let mut seen = Vec::new();
    let mut rest = s.trim();
    while !rest.is_empty() {
        let eq = rest
            .find('=')
            .ok_or_else(|| format!("attribute without value in {s:?}"))?;
        let name = rest[..eq].trim();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(format!("bad attribute name {name:?}"));
        }
        if seen.contains(&name) {
            return Err(format!("duplicate attribute {name}"));
        }
        seen.push(name);
        let after = rest[eq + 1..].trim_start();
        let quote = after.chars().next().ok_or("missing attribute value")?;
        if quote != '"' && quote != '\'' {
            return Err(format!("unquoted attribute {name}"));
        }
        let close = after[1..].find(quote).ok_or("unterminated attribute value")?;
        let value = &after[1..1 + close];
        if value.contains('<') {
            return Err(format!("'<' in attribute {name}"));
        }
        check_text(value)?;
        rest = after[close + 2..].trim_start();
    }
    Ok(())
}

#[test]
fn xml_checker_rejects_malformed_documents() {
    assert!(check_xml(r#"<svg a="1"><g><rect x="0"/></g></svg>"#).is_ok());
    assert!(check_xml("<svg><g></svg>").is_err());
    assert!(check_xml(r#"<svg a=1></svg>"#).is_err());
    assert!(check_xml(r#"<svg a="1" a="2"></svg>"#).is_err());
    assert!(check_xml("<svg></svg><svg></svg>").is_err());
    assert!(check_xml("<svg>a & b</svg>").is_err());
}
