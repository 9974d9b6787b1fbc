//! Double-precision mirror of the coordinate network for use inside the
//! controller. The classifier is trained with a sigmoid output; here the
//! same logit h is mapped through e^h / 2 instead. Both functions cross 0.5
//! exactly at h = 0, so "predicted free" means the same thing under either
//! reading, but e^h / 2 is smooth and convex in h which keeps its
//! linearization conservative-friendly inside the optimizer.
//!
//! The latent code is fixed per camera frame while the optimizer queries
//! hundreds of points, so the z-dependent part of the first hidden layer is
//! folded into a per-frame bias once (`bind`).

use nalgebra::{DMatrix, DVector, Vector3};

use super::{CoordMlp, Model};

#[derive(Debug, Clone)]
pub struct CoordMlpF64 {
    embed_w: DMatrix<f64>,
    embed_b: DVector<f64>,
    /// First hidden layer split at the embed/latent boundary.
    h1_we: DMatrix<f64>,
    h1_wz: DMatrix<f64>,
    h1_b: DVector<f64>,
    rest: Vec<(DMatrix<f64>, DVector<f64>)>,
    out_w: DVector<f64>,
    out_b: f64,
    pub n_z: usize,
}

/// The network with a latent code folded in; cheap to evaluate per point.
#[derive(Debug, Clone)]
pub struct BoundMlp<'a> {
    net: &'a CoordMlpF64,
    h1_bias: DVector<f64>,
}

fn to_f64(m: &ndarray::Array2<f32>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| m[[r, c]] as f64)
}

impl CoordMlpF64 {
    pub fn from_model(model: &Model) -> CoordMlpF64 {
        Self::from_mlp(&model.mlp, model.arch.d_embed, model.arch.n_z)
    }

    pub fn from_mlp(mlp: &CoordMlp, d_embed: usize, n_z: usize) -> CoordMlpF64 {
        let w1 = to_f64(&mlp.hidden[0].w);
        let h1_we = w1.columns(0, d_embed).into_owned();
        let h1_wz = w1.columns(d_embed, n_z).into_owned();
        let rest = mlp.hidden[1..]
            .iter()
            .map(|d| {
                (to_f64(&d.w), DVector::from_iterator(d.b.len(), d.b.iter().map(|&v| v as f64)))
            })
            .collect();
        CoordMlpF64 {
            embed_w: to_f64(&mlp.embed.w),
            embed_b: DVector::from_iterator(mlp.embed.b.len(), mlp.embed.b.iter().map(|&v| v as f64)),
            h1_we,
            h1_wz,
            h1_b: DVector::from_iterator(
                mlp.hidden[0].b.len(),
                mlp.hidden[0].b.iter().map(|&v| v as f64),
            ),
            rest,
            out_w: DVector::from_iterator(mlp.out.w.ncols(), mlp.out.w.row(0).iter().map(|&v| v as f64)),
            out_b: mlp.out.b[0] as f64,
            n_z,
        }
    }

    /// Fold a latent code into the first hidden layer bias.
    pub fn bind(&self, z: &DVector<f64>) -> BoundMlp<'_> {
        assert_eq!(z.len(), self.n_z);
        BoundMlp { net: self, h1_bias: &self.h1_wz * z + &self.h1_b }
    }
}

impl BoundMlp<'_> {
    /// Raw logit h(a) for a scaled point.
    pub fn logit(&self, a: &Vector3<f64>) -> f64 {
        self.logit_grad(a).0
    }

    /// Logit and its gradient with respect to the scaled point.
    pub fn logit_grad(&self, a: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let n = self.net;
        let a_dyn = DVector::from_column_slice(a.as_slice());
        let e = (&n.embed_w * &a_dyn + &n.embed_b).map(f64::tanh);
        let mut act = (&n.h1_we * &e + &self.h1_bias).map(f64::tanh);
        let mut acts = vec![act.clone()];
        for (w, b) in &n.rest {
            act = (w * &act + b).map(f64::tanh);
            acts.push(act.clone());
        }
        let h = n.out_w.dot(&act) + n.out_b;

        // Reverse pass: d h / d a.
        let mut d = n.out_w.clone();
        for (i, (w, _)) in n.rest.iter().enumerate().rev() {
            let post = &acts[i + 1];
            let dpre = d.zip_map(post, |dv, av| dv * (1.0 - av * av));
            d = w.transpose() * dpre;
        }
        let dpre1 = d.zip_map(&acts[0], |dv, av| dv * (1.0 - av * av));
        let de = n.h1_we.transpose() * dpre1;
        let de_pre = de.zip_map(&e, |dv, av| dv * (1.0 - av * av));
        let da = n.embed_w.transpose() * de_pre;
        (h, Vector3::new(da[0], da[1], da[2]))
    }

    /// Collision measure e^h / 2 with its gradient in the scaled point.
    /// Values below 0.5 mean "predicted free", matching sigmoid(h) < 0.5.
    pub fn collision_value_grad(&self, a: &Vector3<f64>) -> (f64, Vector3<f64>) {
        let (h, dh) = self.logit_grad(a);
        let v = 0.5 * h.exp();
        (v, dh * v)
    }
}
