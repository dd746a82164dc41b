//! Deterministic InfoNCE baseline over cosine similarity of the means.

use crate::gaussian::GaussianEmbedding;
use crate::matrix::Matrix;
use crate::objective::infonce_loss_with_grad;
use crate::Result;

const NORM_FLOOR: f64 = 1e-12;

/// Loss plus gradients on the image and text means.
type LossAndMeanGrads = (f64, Vec<Vec<f64>>, Vec<Vec<f64>>);

fn unit(v: &[f64]) -> (Vec<f64>, f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    (v.iter().map(|x| x / norm).collect(), norm)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn cosine_matrix(left: &[GaussianEmbedding], right: &[GaussianEmbedding]) -> Matrix {
    let l: Vec<_> = left.iter().map(|z| unit(z.mu()).0).collect();
    let r: Vec<_> = right.iter().map(|z| unit(z.mu()).0).collect();
    Matrix::from_fn(l.len(), r.len(), |i, j| dot(&l[i], &r[j]))
}

/// Splits `2B` embeddings into the `(first, second)` inputs of each study.
fn halves(z: &[GaussianEmbedding]) -> (&[GaussianEmbedding], &[GaussianEmbedding]) {
    z.split_at(z.len() / 2)
}

pub(crate) fn four_pair_infonce_loss(
    img: &[GaussianEmbedding],
    txt: &[GaussianEmbedding],
    temperature: f64,
) -> Result<f64> {
    let (v1, v2) = halves(img);
    let (t1, t2) = halves(txt);
    let mut acc = 0.0;
    for (a, b) in [(v1, t1), (v1, t2), (v2, t1), (v2, t2)] {
        acc += infonce_loss_with_grad(&cosine_matrix(a, b), temperature)?.0;
    }
    Ok(acc / 4.0)
}

/// Loss and gradients with respect to the means of all `2B` image and `2B`
/// text embeddings.
pub(crate) fn four_pair_infonce(
    img: &[GaussianEmbedding],
    txt: &[GaussianEmbedding],
    temperature: f64,
) -> Result<LossAndMeanGrads> {
    let b = img.len() / 2;
    let dim = img[0].dim();
    let img_units: Vec<_> = img.iter().map(|z| unit(z.mu())).collect();
    let txt_units: Vec<_> = txt.iter().map(|z| unit(z.mu())).collect();
    let mut g_img = vec![vec![0.0; dim]; 2 * b];
    let mut g_txt = vec![vec![0.0; dim]; 2 * b];
    let mut loss = 0.0;
    for (io, to) in [(0, 0), (0, b), (b, 0), (b, b)] {
        let sim = Matrix::from_fn(b, b, |i, j| dot(&img_units[io + i].0, &txt_units[to + j].0));
        let (l, d_sim) = infonce_loss_with_grad(&sim, temperature)?;
        loss += 0.25 * l;
        // d cos(u, v) / du = (v_hat - cos * u_hat) / |u|
        for i in 0..b {
            let (ui, nu) = &img_units[io + i];
            for j in 0..b {
                let (vj, nv) = &txt_units[to + j];
                let g = 0.25 * d_sim.get(i, j);
                if g == 0.0 {
                    continue;
                }
                let s = sim.get(i, j);
                for d in 0..dim {
                    g_img[io + i][d] += g * (vj[d] - s * ui[d]) / nu;
                    g_txt[to + j][d] += g * (ui[d] - s * vj[d]) / nv;
                }
            }
        }
    }
    Ok((loss, g_img, g_txt))
}
