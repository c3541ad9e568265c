use crate::error::Result;
use crate::model::{uncontextualized_forward, Model};
use crate::numkit::{pca_fit, Matrix, PcaResult, Real};
use crate::rope::RopeScalerSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRow {
    /// 1-based.
    pub layer: usize,
    /// `"mask"` or `"prior"`.
    pub source: &'static str,
    pub coords: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    pub pca: PcaResult,
    /// The `2L` full-space states, mask rows first.
    pub states: Matrix<f64>,
}

/// Joint 3-component PCA over the layer states `1..L` of the
/// uncontextualized mask token and of the prior embedding. Missing
/// components (degenerate covariance) are reported as zero coordinates and
/// flagged in `pca.rank_deficient`.
pub fn pca_trajectory<T: Real>(model: &Model<T>, scaler: &RopeScalerSpec, prior_embedding: &[f64]) -> Result<Trajectory> {
    let l = model.spec.n_layers;
    let mask_row = model.weights.tok_emb.row(model.spec.mask_id as usize).to_vec();
    let prior: Vec<T> = prior_embedding.iter().map(|&x| T::cast(x)).collect();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(2 * l);
    for e in [&mask_row, &prior] {
        let t = uncontextualized_forward(e, model, scaler)?;
        rows.extend(t.hidden[1..=l].iter().map(|m| m.row(0).iter().map(|x| x.wide()).collect::<Vec<f64>>()));
    }
    let states = Matrix::from_rows(&rows)?;
    let k = 3.min(2 * l).min(model.spec.d_model);
    let pca = pca_fit(&states, k)?;
    let out = rows
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let z = pca.project(s);
            let mut coords = [0.0; 3];
            for (c, v) in coords.iter_mut().zip(z) {
                *c = v;
            }
            TrajectoryRow {
                layer: i % l + 1,
                source: if i < l { "mask" } else { "prior" },
                coords,
            }
        })
        .collect();
    Ok(Trajectory { rows: out, pca, states })
}
