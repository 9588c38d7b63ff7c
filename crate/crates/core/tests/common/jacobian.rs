//! Reported log-determinants against numerically differentiated Jacobians.

use rareflow::distributions::{BaseDistribution, SimRng};
use rareflow::flows::{
    build_architecture, ArchitectureSpec, ConditionerSpec, FlowModel, LayerSpec,
};
use rareflow::tensor::Tensor;

const MODELS_PER_DIM: usize = 100;
const TOL: f64 = 1e-5;

/// Determinant by Gaussian elimination with partial pivoting.
fn det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        if a[p][c] == 0.0 {
            return 0.0;
        }
        if p != c {
            a.swap(p, c);
            d = -d;
        }
        d *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            let pivot = a[c].clone();
            for (v, p) in a[r][c..].iter_mut().zip(&pivot[c..]) {
                *v -= f * p;
            }
        }
    }
    d
}

fn shuffled(dim: usize, rng: &mut SimRng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..dim).collect();
    for i in (1..dim).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        p.swap(i, j);
    }
    p
}

fn random_spec(dim: usize, k: usize, rng: &mut SimRng) -> ArchitectureSpec {
    let pick = |rng: &mut SimRng, lo: usize, hi: usize| {
        lo + (rng.next_u64() % (hi - lo + 1) as u64) as usize
    };
    let couplings = pick(rng, 1, 3);
    let split = pick(rng, 1, dim - 1);
    let compositions = pick(rng, 1, 3);
    let perm = shuffled(dim, rng);
    let normal = BaseDistribution::StandardNormal { dim };
    let mut spec = match k % 5 {
        0 => ArchitectureSpec {
            dim,
            base: normal,
            layers: vec![LayerSpec::Rational { compositions }],
            init_scale: 0.0,
        },
        1 => ArchitectureSpec::coupling_stack(
            normal,
            couplings,
            split,
            compositions,
            ConditionerSpec::Affine,
            false,
            perm,
        ),
        2 => ArchitectureSpec::coupling_stack(
            normal,
            couplings,
            split,
            compositions,
            ConditionerSpec::Perceptron {
                hidden: vec![pick(rng, 2, 6)],
            },
            false,
            perm,
        ),
        3 => ArchitectureSpec::coupling_stack(
            BaseDistribution::UniformUnitCube { dim },
            couplings,
            split,
            compositions,
            ConditionerSpec::Affine,
            true,
            perm,
        ),
        _ => {
            let mut s = ArchitectureSpec::coupling_stack(
                normal,
                couplings,
                split,
                compositions,
                ConditionerSpec::Affine,
                false,
                perm,
            );
            s.layers.push(LayerSpec::ElementwiseExp);
            s
        }
    };
    spec.init_scale = 0.1 + 0.3 * rng.uniform();
    spec
}

fn point(model: &FlowModel, rng: &mut SimRng) -> Vec<f64> {
    match model.base() {
        BaseDistribution::UniformUnitCube { dim } => {
            (0..*dim).map(|_| 0.05 + 0.9 * rng.uniform()).collect()
        }
        other => other
            .sample(1, rng)
            .row(0)
            .iter()
            .map(|v| v.clamp(-2.5, 2.5))
            .collect(),
    }
}

fn forward(model: &FlowModel, z: &[f64]) -> (Vec<f64>, f64) {
    let t = Tensor::matrix(1, z.len(), z.to_vec()).unwrap();
    let (x, ld) = model.forward(&t).unwrap();
    (x.row(0).to_vec(), ld[0])
}

/// Relative error between `exp(reported logdet)` and the determinant of the
/// central-difference Jacobian.
fn jacobian_error(model: &FlowModel, z: &[f64]) -> f64 {
    let d = z.len();
    let (_, logdet) = forward(model, z);
    let h = 1e-6;
    // jac[i][j] = ∂x_i / ∂z_j
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut zp = z.to_vec();
        zp[j] += h;
        let mut zm = z.to_vec();
        zm[j] -= h;
        let (xp, _) = forward(model, &zp);
        let (xm, _) = forward(model, &zm);
        for i in 0..d {
            jac[i][j] = (xp[i] - xm[i]) / (2.0 * h);
        }
    }
    let numeric = det(jac).abs();
    (logdet.exp() - numeric).abs() / numeric
}

fn suite(dim: usize, seed: u64) {
    let mut rng = SimRng::new(seed);
    let mut worst: f64 = 0.0;
    for k in 0..MODELS_PER_DIM {
        let spec = random_spec(dim, k, &mut rng);
        let model = build_architecture(&spec, &mut rng).unwrap();
        for _ in 0..2 {
            let z = point(&model, &mut rng);
            let err = jacobian_error(&model, &z);
            assert!(
                err <= TOL,
                "model {k} ({spec:?}) at {z:?}: relative error {err:e}"
            );
            worst = worst.max(err);
        }
    }
    eprintln!("dim {dim}: worst relative determinant error {worst:e}");
}

pub fn random_models_dim_two() {
    suite(2, 2);
}

pub fn random_models_dim_five() {
    suite(5, 5);
}

pub fn determinant_oracle() {
    let a = vec![
        vec![2.0, 1.0, 0.0],
        vec![1.0, 3.0, 1.0],
        vec![0.0, 1.0, 4.0],
    ];
    assert!((det(a) - 18.0).abs() < 1e-12);
    assert_eq!(det(vec![vec![0.0, 1.0], vec![1.0, 0.0]]), -1.0);
}
