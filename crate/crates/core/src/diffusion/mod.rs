//! Noise schedules, the forward process, the noise-prediction objective,
//! teacher training and ancestral sampling.
//!
//! Diffusion steps run over `1..=T`. Networks index time from zero, so step
//! `s` is fed to the denoiser as `s - 1`.

mod objective;
mod sample;
mod schedule;
mod teacher;

pub use objective::{batch_loss, ddpm_loss, sample_batch, DdpmLoss, DdpmObjective, EpsPredictor};
pub use sample::{ancestral_sample, energy_distance};
pub use schedule::{forward_sample, linear_beta_schedule, DiffusionBatch, NoiseSchedule};
pub use teacher::{train_teacher, Teacher, TeacherConfig, TrainLog};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autonet::{DenoiserArch, OptimizerConfig};
    use crate::datasets::gaussian_mixture;
    use crate::numeric::{Matrix, RngStream};

    fn toy_config(epochs: usize) -> TeacherConfig {
        TeacherConfig {
            epochs,
            batch_size: 64,
            optimizer: OptimizerConfig::Adam {
                lr: 3e-3,
                weight_decay: 0.0,
            },
            ..TeacherConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let s = linear_beta_schedule(20, 1e-4, 0.02).unwrap();
        let arch = DenoiserArch::bottleneck(4, 8, 3, 20);
        let (ds, _) = gaussian_mixture(2, 4, 64, 0.2, &mut RngStream::new(1, 0)).unwrap();
        let cfg = TeacherConfig {
            epochs: 1,
            batch_size: 16,
            optimizer: OptimizerConfig::Sgd {
                lr: 0.0,
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            ..TeacherConfig::default()
        };
        let mut rng = RngStream::new(2, 0);
        let init = arch.init(&mut rng.child(1)).unwrap();
        let (t, _) = train_teacher(&arch, &s, &ds, &cfg, &mut rng).unwrap();
        assert_eq!(t.params, init);
        assert!(t.ema_params.max_abs_diff(&init).unwrap() < 1e-15);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let s = linear_beta_schedule(50, 1e-4, 0.05).unwrap();
        let arch = DenoiserArch::bottleneck(4, 32, 8, 50);
        let (ds, _) = gaussian_mixture(4, 4, 512, 0.1, &mut RngStream::new(3, 0)).unwrap();
        let run = || train_teacher(&arch, &s, &ds, &toy_config(30), &mut RngStream::new(4, 0)).unwrap();
        let (a, log) = run();
        let (b, _) = run();
        assert_eq!(a.params, b.params);
        assert!(log.final_loss < 0.5 * log.initial_loss, "{log:?}");
    }

    #[test]
    fn rejects_uncentered_data_and_mismatched_schedule() {
        let s = linear_beta_schedule(20, 1e-4, 0.02).unwrap();
        let arch = DenoiserArch::bottleneck(2, 8, 3, 20);
        let ds = crate::datasets::LabeledDataset::new(Matrix::filled(4, 2, 1.0), vec![0, 1, 0, 1], 2).unwrap();
        assert!(train_teacher(&arch, &s, &ds, &toy_config(1), &mut RngStream::new(0, 0)).is_err());
        let other = DenoiserArch::bottleneck(2, 8, 3, 30);
        assert!(Teacher::new(other.clone(), s, other.init(&mut RngStream::new(0, 0)).unwrap()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let s = linear_beta_schedule(20, 1e-4, 0.02).unwrap();
        let arch = DenoiserArch::bottleneck(4, 16, 4, 20);
        let (ds, _) = gaussian_mixture(2, 4, 128, 0.2, &mut RngStream::new(5, 0)).unwrap();
        let cfg = TeacherConfig {
            epochs: 50,
            batch_size: 32,
            optimizer: OptimizerConfig::Sgd {
                lr: 1e6,
                momentum: 0.9,
                weight_decay: 0.0,
            },
            ..TeacherConfig::default()
        };
        let err = train_teacher(&arch, &s, &ds, &cfg, &mut RngStream::new(6, 0)).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }

    /// Exact noise predictor for data concentrated at the origin.
    struct PointOracle {
        schedule: NoiseSchedule,
    }

    impl EpsPredictor for PointOracle {
        fn dim(&self) -> usize {
            3
        }

        fn predict_eps(&self, xt: &Matrix, steps: &[usize]) -> crate::Result<Matrix> {
            let mut out = xt.clone();
            for (r, &s) in steps.iter().enumerate() {
                let k = 1.0 / (1.0 - self.schedule.alpha_bar(s)).sqrt();
                out.row_mut(r).iter_mut().for_each(|v| *v *= k);
            }
            Ok(out)
        }
    }

    #[test]
    fn perfect_oracle_collapses_to_point() {
        let schedule = linear_beta_schedule(100, 1e-4, 0.02).unwrap();
        let oracle = PointOracle {
            schedule: schedule.clone(),
        };
        let a = ancestral_sample(&oracle, &schedule, 200, &mut RngStream::new(7, 0)).unwrap();
        assert!(a.max_abs() < 1e-9, "{}", a.max_abs());
        let b = ancestral_sample(&oracle, &schedule, 200, &mut RngStream::new(7, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn trained_teacher_beats_noise_in_energy_distance() {
        let s = linear_beta_schedule(50, 1e-4, 0.05).unwrap();
        let arch = DenoiserArch::bottleneck(2, 64, 16, 50);
        let (ds, _) = gaussian_mixture(2, 2, 1024, 0.1, &mut RngStream::new(8, 0)).unwrap();
        let (teacher, _) = train_teacher(&arch, &s, &ds, &toy_config(40), &mut RngStream::new(9, 0)).unwrap();
        let (held, _) = gaussian_mixture(2, 2, 1024, 0.1, &mut RngStream::new(8, 0)).unwrap();
        let held = held.x.select_rows(&(0..300).collect::<Vec<_>>());
        let gen = ancestral_sample(&teacher, &s, 300, &mut RngStream::new(10, 0)).unwrap();
        let noise = crate::numeric::standard_normal(&mut RngStream::new(11, 0), 300, 2);
        let e_gen = energy_distance(&gen, &held).unwrap();
        let e_noise = energy_distance(&noise, &held).unwrap();
        assert!(e_gen < e_noise, "gen {e_gen} noise {e_noise}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let s = linear_beta_schedule(10, 1e-4, 0.02).unwrap();
        let arch = DenoiserArch::bottleneck(4, 8, 2, 10).with_attention(2);
        let (ds, _) = gaussian_mixture(2, 4, 32, 0.2, &mut RngStream::new(12, 0)).unwrap();
        let (t, _) = train_teacher(&arch, &s, &ds, &toy_config(2), &mut RngStream::new(13, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.bin");
        t.save(&path).unwrap();
        let back = Teacher::load(&path).unwrap();
        assert_eq!(back.params, t.params);
        assert_eq!(back.ema_params, t.ema_params);
        assert_eq!(back.schedule, t.schedule);
        assert_eq!(back.arch, t.arch);
    }
}
