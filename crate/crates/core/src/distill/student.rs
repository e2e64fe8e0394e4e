use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autonet::{
    accuracy, cross_entropy, init_weight, load_params, mlp_backward, mlp_forward, save_params, MlpCache, MlpSpec,
    Objective, ParamStore,
};
use crate::error::ensure;
use crate::numeric::{Matrix, RngStream};
use crate::{Error, Result};

use super::LossKind;

const ENC: &str = "student";
const PROJ: &str = "proj.w";

/// Perceptron encoder whose last hidden layer is the feature tap, a linear
/// head on that tap, and a linear projector from the tap to teacher width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub teacher_width: usize,
}

impl StudentArch {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.hidden.is_empty(),
            InvalidArgument,
            "student needs at least one hidden layer"
        );
        ensure!(self.classes >= 2, InvalidArgument, "student needs at least 2 classes");
        ensure!(
            self.teacher_width >= 1,
            InvalidArgument,
            "teacher width must be positive"
        );
        self.spec().validate()
    }

    fn spec(&self) -> MlpSpec {
        MlpSpec::new(self.input_dim, self.hidden.clone(), self.classes)
    }

    pub fn feature_width(&self) -> usize {
        *self.hidden.last().expect("validated")
    }

    fn tap(&self) -> usize {
        self.hidden.len() - 1
    }

    pub fn init(&self, rng: &mut RngStream) -> Result<ParamStore> {
        self.validate()?;
        let mut p = ParamStore::new();
        self.spec().init_params(ENC, rng, &mut p)?;
        let f = self.feature_width();
        let proj = if f == self.teacher_width {
            Matrix::identity(f)
        } else {
            init_weight(rng, f, self.teacher_width)
        };
        p.insert(PROJ, proj)?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentNet {
    pub arch: StudentArch,
    pub params: ParamStore,
}

/// Activations of one student forward pass.
#[derive(Debug, Clone)]
pub struct StudentForward {
    cache: MlpCache,
    pub features: Matrix,
    pub projected: Matrix,
}

impl StudentForward {
    pub fn logits(&self) -> &Matrix {
        self.cache.output()
    }
}

impl StudentNet {
    pub fn new(arch: StudentArch, rng: &mut RngStream) -> Result<Self> {
        let params = arch.init(rng)?;
        Ok(Self { arch, params })
    }

    pub fn forward(&self, x: &Matrix) -> Result<StudentForward> {
        student_forward(&self.params, &self.arch, x)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.logits().clone())
    }

    pub fn accuracy(&self, x: &Matrix, y: &[usize]) -> Result<f64> {
        Ok(accuracy(&self.predict(x)?, y))
    }

    /// Weights file with the architecture stored in its header.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_params(path, &self.params, &serde_json::to_value(&self.arch)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = load_params(path)?;
        let arch: StudentArch = serde_json::from_value(meta)?;
        let template = arch.init(&mut RngStream::new(0, 0))?;
        if !template.same_layout(&params) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "tensor layout does not match the stored architecture".into(),
            });
        }
        Ok(Self { arch, params })
    }
}

pub fn student_forward(params: &ParamStore, arch: &StudentArch, x: &Matrix) -> Result<StudentForward> {
    let cache = mlp_forward(params, ENC, &arch.spec(), x, None)?;
    let features = cache.hidden(arch.tap()).clone();
    let projected = features.matmul(params.get(PROJ)?)?;
    Ok(StudentForward {
        cache,
        features,
        projected,
    })
}

/// Parameter gradients given the loss gradient at the logits and/or at the
/// projected features.
pub fn student_backward(
    params: &ParamStore,
    arch: &StudentArch,
    fwd: &StudentForward,
    d_logits: Option<&Matrix>,
    d_projected: Option<&Matrix>,
) -> Result<ParamStore> {
    let mut grads = params.zeros_like();
    let d_feat = match d_projected {
        Some(d) => {
            grads.accumulate(PROJ, &fwd.features.t_matmul(d)?)?;
            Some(d.matmul_t(params.get(PROJ)?)?)
        }
        None => None,
    };
    let taps: Vec<(usize, &Matrix)> = d_feat.as_ref().map(|d| (arch.tap(), d)).into_iter().collect();
    mlp_backward(params, ENC, &arch.spec(), &fwd.cache, d_logits, &taps, &mut grads)?;
    Ok(grads)
}

/// `weight · L_kd(project(f(x)), z_teacher)` over student parameters.
pub struct DistillObjective<'a> {
    pub arch: &'a StudentArch,
    pub x: &'a Matrix,
    pub teacher_features: &'a Matrix,
    pub kind: LossKind,
    pub weight: f64,
}

impl Objective for DistillObjective<'_> {
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        let fwd = student_forward(params, self.arch, self.x)?;
        Ok(self.weight * self.kind.eval(&fwd.projected, self.teacher_features)?.loss)
    }

    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, ParamStore)> {
        let fwd = student_forward(params, self.arch, self.x)?;
        let lg = self.kind.eval(&fwd.projected, self.teacher_features)?;
        let d = lg.d_zs.scale(self.weight);
        let grads = student_backward(params, self.arch, &fwd, None, Some(&d))?;
        Ok((self.weight * lg.loss, grads))
    }
}

/// Cross-entropy of the student head over student parameters.
pub struct TaskObjective<'a> {
    pub arch: &'a StudentArch,
    pub x: &'a Matrix,
    pub y: &'a [usize],
}

impl Objective for TaskObjective<'_> {
    fn loss(&self, params: &ParamStore) -> Result<f64> {
        let fwd = student_forward(params, self.arch, self.x)?;
        Ok(cross_entropy(fwd.logits(), self.y)?.loss)
    }

    fn loss_and_grad(&self, params: &ParamStore) -> Result<(f64, ParamStore)> {
        let fwd = student_forward(params, self.arch, self.x)?;
        let ce = cross_entropy(fwd.logits(), self.y)?;
        let grads = student_backward(params, self.arch, &fwd, Some(&ce.d_logits), None)?;
        Ok((ce.loss, grads))
    }
}
