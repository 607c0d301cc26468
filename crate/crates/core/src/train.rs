//! Two-stage optimization. Stage 1 fits the volume field; stage 2 meshes it
//! into a tetrahedral SDF and refines geometry and color together. Both
//! stages take score distillation gradients from a depth-conditioned image
//! backend and a pose-conditioned backend, plus reconstruction terms whenever
//! the camera sits at the reference pose.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::field::{FieldConfig, VolumeField};
use crate::guidance::{
    depth_condition, sds_gradient, BackendContext, BackendKind, BackendRegistry, CameraDelta, ConditionSet,
    GuidanceBackend, ScheduleConfig, SdsConfig,
};
use crate::io::checkpoint::{save_checkpoint, Checkpoint};
use crate::losses::{loss_depth, loss_normal, loss_rec, total_loss, LossTerms, LossWeights, ReferenceBundle};
use crate::optim::{Adam, AdamConfig};
use crate::render::{
    generate_rays, render, render_backward, render_train, Background, CameraPose, RenderGrad, RenderOutput,
    RenderSettings, RenderTape,
};
use crate::tet::{
    export_obj, init_from_field, marching_backward, marching_tetrahedra, render_mesh, render_mesh_backward,
    render_mesh_train, sample_vertex_colors, MeshTape, RasterSettings, TetInitConfig, TetMesh, TriangleMesh,
};
use crate::{Error, Result};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const STAGE1_CHECKPOINT_FILE: &str = "stage1.bin";
pub const MESH_FILE: &str = "mesh.obj";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub iters_per_epoch: usize,
    /// Leading stage-1 epochs guided by the pose-conditioned backend alone.
    pub warmup_epochs: usize,
    pub weights: LossWeights,
    /// Degrees, inclusive.
    pub elevation_range: [f64; 2],
    pub radius_range: [f64; 2],
    /// Iterations divisible by this use the reference pose; 0 never does.
    pub reference_view_every: usize,
    pub adam: AdamConfig,
    pub stage1_lr: f64,
    /// Learning rate of the SDF values and deformations.
    pub stage2_geometry_lr: f64,
    pub stage2_color_lr: f64,
    /// Square training render size.
    pub resolution: usize,
    /// Overrides the background of both renderers.
    pub background: Background,
    pub render: RenderSettings,
    pub raster: RasterSettings,
    pub sds: SdsConfig,
    pub normal_kernel: usize,
    pub tet: TetInitConfig,
    /// Opacity above which rendered depth feeds the depth condition.
    pub depth_condition_threshold: f64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            stage1_epochs: 50,
            stage2_epochs: 30,
            iters_per_epoch: 100,
            warmup_epochs: 15,
            weights: LossWeights::default(),
            elevation_range: [-10.0, 30.0],
            radius_range: [2.5, 2.5],
            reference_view_every: 2,
            adam: AdamConfig::default(),
            stage1_lr: 1e-3,
            stage2_geometry_lr: 5e-3,
            stage2_color_lr: 1e-3,
            resolution: 64,
            background: Background::Random,
            render: RenderSettings::default(),
            raster: RasterSettings::default(),
            sds: SdsConfig::default(),
            normal_kernel: 9,
            tet: TetInitConfig::default(),
            depth_condition_threshold: 0.5,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.stage1_epochs {
            return Err(Error::invalid(format!(
                "warmup of {} epochs exceeds the {} stage-1 epochs",
                self.warmup_epochs, self.stage1_epochs
            )));
        }
        if self.iters_per_epoch == 0 || self.resolution == 0 {
            return Err(Error::invalid("iters_per_epoch and resolution must be positive"));
        }
        check_range(self.elevation_range, "elevation")?;
        check_range(self.radius_range, "radius")?;
        if self.elevation_range[0] <= -90.0 || self.elevation_range[1] >= 90.0 {
            return Err(Error::invalid("elevation range must lie strictly within (-90, 90)"));
        }
        if self.radius_range[0] <= 0.0 {
            return Err(Error::invalid("radius range must be positive"));
        }
        for lr in [self.stage1_lr, self.stage2_geometry_lr, self.stage2_color_lr] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::invalid("learning rates must be finite and nonnegative"));
            }
        }
        self.weights.validate()?;
        self.sds.step_range(1000)?;
        Ok(())
    }

    pub fn stage1_iters(&self) -> u64 {
        (self.stage1_epochs * self.iters_per_epoch) as u64
    }

    pub fn total_iters(&self) -> u64 {
        ((self.stage1_epochs + self.stage2_epochs) * self.iters_per_epoch) as u64
    }

    pub fn epoch_of(&self, iteration: u64) -> usize {
        iteration as usize / self.iters_per_epoch
    }

    pub fn is_reference_iteration(&self, iteration: u64) -> bool {
        self.reference_view_every > 0 && iteration.is_multiple_of(self.reference_view_every as u64)
    }

    /// Raster softness at `iteration`, halved from the middle of stage 2 on.
    pub fn raster_temperature(&self, iteration: u64) -> f64 {
        let midpoint = self.stage1_iters() + (self.total_iters() - self.stage1_iters()) / 2;
        if iteration >= midpoint {
            0.5 * self.raster.temperature
        } else {
            self.raster.temperature
        }
    }
}

fn check_range(range: [f64; 2], what: &str) -> Result<()> {
    if !(range[0].is_finite() && range[1].is_finite()) || range[0] > range[1] {
        return Err(Error::invalid(format!("empty {what} range {range:?}")));
    }
    Ok(())
}

fn draw<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2], what: &str) -> Result<f64> {
    check_range(range, what)?;
    Ok(if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    })
}

/// Which guidance backends contribute at an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceSelection {
    pub use_2d: bool,
    pub use_3d: bool,
}

impl GuidanceSelection {
    pub const BOTH: Self = Self {
        use_2d: true,
        use_3d: true,
    };
}

/// Epochs `[0, n)` use only the pose-conditioned backend.
pub fn warmup_active(epoch: usize, n: usize) -> GuidanceSelection {
    GuidanceSelection {
        use_2d: epoch >= n,
        use_3d: true,
    }
}

/// The reference pose on reference iterations, otherwise a pose with uniform
/// azimuth, elevation and radius. Field of view and look-at follow the
/// reference.
pub fn sample_camera<R: Rng + ?Sized>(
    plan: &TrainPlan,
    iteration: u64,
    reference: &CameraPose,
    rng: &mut R,
) -> Result<CameraPose> {
    if plan.is_reference_iteration(iteration) {
        return Ok(*reference);
    }
    let azimuth = rng.random_range(0.0..360.0);
    let elevation = draw(rng, plan.elevation_range, "elevation")?;
    let radius = draw(rng, plan.radius_range, "radius")?;
    Ok(CameraPose {
        azimuth_deg: azimuth,
        elevation_deg: elevation,
        radius,
        ..*reference
    })
}

/// Relative pose with azimuth wrapped into `[-180, 180)`.
pub fn camera_delta(pose: &CameraPose, reference: &CameraPose) -> CameraDelta {
    CameraDelta {
        azimuth_deg: (pose.azimuth_deg - reference.azimuth_deg + 180.0).rem_euclid(360.0) - 180.0,
        elevation_deg: pose.elevation_deg - reference.elevation_deg,
        radius: pose.radius - reference.radius,
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub stage: u8,
    pub epoch: usize,
    pub reference_view: bool,
    pub selection: GuidanceSelection,
    pub pose: CameraPose,
    pub terms: LossTerms,
    pub total: f64,
    pub timestep_2d: Option<usize>,
    pub timestep_3d: Option<usize>,
    /// Root mean square of the weighted distillation gradient on the image.
    pub sds_grad_rms: f64,
}

/// Builds the depth-conditioned and pose-conditioned backends from a registry.
pub fn build_backends(
    registry: &BackendRegistry,
    name: &str,
    plan: &TrainPlan,
    reference: &ReferenceBundle,
    schedule: ScheduleConfig,
    options: serde_json::Value,
) -> Result<(Box<dyn GuidanceBackend>, Box<dyn GuidanceBackend>)> {
    let ctx = BackendContext {
        schedule,
        reference_image: reference.image.clone(),
        reference_pose: reference.pose,
        height: plan.resolution,
        width: plan.resolution,
        render: RenderSettings {
            background: plan.background,
            ..plan.render.clone()
        },
        options,
    };
    Ok((
        registry.build(name, &ctx, BackendKind::ImagePromptDepth)?,
        registry.build(name, &ctx, BackendKind::PoseConditioned)?,
    ))
}

/// Parameters restored from a checkpoint, renderable without a trainer.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub field: VolumeField,
    pub mesh: Option<TetMesh>,
    pub iteration: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    iteration: u64,
    seed: u64,
    field: FieldConfig,
    /// `(resolution, bound)` of the tet grid in stage 2.
    tet: Option<(usize, f64)>,
    calls_2d: u64,
    calls_3d: u64,
    adam_config: AdamConfig,
    adam_group_lr: Vec<f64>,
    adam_step: u64,
}

fn copy_into(dst: &mut [f64], src: &[f64], name: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "array `{name}` has {} values, expected {}",
            src.len(),
            dst.len()
        )));
    }
    dst.copy_from_slice(src);
    Ok(())
}

impl TrainedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        let mut field = VolumeField::new(meta.field, meta.seed)?;
        for (i, group) in field.param_groups_mut().into_iter().enumerate() {
            let name = format!("field.{i}");
            copy_into(group, ckpt.array(&name)?, &name)?;
        }
        field.set_iteration(meta.iteration);
        let mesh = match meta.tet {
            None => None,
            Some((resolution, bound)) => {
                let mut mesh = TetMesh::bcc(resolution, bound)?;
                copy_into(&mut mesh.sdf, ckpt.array("mesh.sdf")?, "mesh.sdf")?;
                copy_into(&mut mesh.deform_raw, ckpt.array("mesh.deform_raw")?, "mesh.deform_raw")?;
                Some(mesh)
            }
        };
        Ok(Self {
            field,
            mesh,
            iteration: meta.iteration,
            seed: meta.seed,
        })
    }

    /// Deterministic render: the volume field in stage 1, the extracted
    /// surface colored by the field in stage 2.
    pub fn render(
        &self,
        pose: &CameraPose,
        height: usize,
        width: usize,
        settings: &RenderSettings,
        raster: &RasterSettings,
    ) -> Result<RenderOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match &self.mesh {
            None => render(&self.field, &generate_rays(pose, height, width)?, settings, &mut rng),
            Some(mesh) => render_mesh(&marching_tetrahedra(mesh), &self.field, pose, height, width, raster, &mut rng),
        }
    }

    /// Surface with per-vertex colors. A stage-1 model is meshed with `tet`.
    pub fn surface(&self, tet: &TetInitConfig) -> Result<TriangleMesh> {
        let mut surface = match &self.mesh {
            Some(mesh) => marching_tetrahedra(mesh),
            None => marching_tetrahedra(&init_from_field(&self.field, tet.resolution, tet.iso_density)?),
        };
        sample_vertex_colors(&mut surface, &self.field)?;
        Ok(surface)
    }
}

enum Tape {
    Volume(RenderTape),
    Mesh(TriangleMesh, MeshTape),
}

/// Paths written by [`Trainer::run`] and the records of the iterations it ran.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub stage1_checkpoint: Option<PathBuf>,
    pub mesh: Option<PathBuf>,
    pub log: PathBuf,
    pub records: Vec<StepRecord>,
}

pub struct Trainer {
    plan: TrainPlan,
    seed: u64,
    reference: ReferenceBundle,
    field: VolumeField,
    mesh: Option<TetMesh>,
    optimizer: Adam,
    guidance_2d: Box<dyn GuidanceBackend>,
    guidance_3d: Box<dyn GuidanceBackend>,
    /// Control maps and text handed to the depth-conditioned backend.
    extra_conditions: ConditionSet,
    calls_2d: u64,
    calls_3d: u64,
    iteration: u64,
}

impl Trainer {
    pub fn new(
        plan: TrainPlan,
        field_config: FieldConfig,
        reference: ReferenceBundle,
        guidance_2d: Box<dyn GuidanceBackend>,
        guidance_3d: Box<dyn GuidanceBackend>,
        seed: u64,
    ) -> Result<Self> {
        plan.validate()?;
        reference.validate()?;
        if reference.height() != plan.resolution || reference.width() != plan.resolution {
            return Err(Error::ShapeMismatch(format!(
                "reference is {}x{}, training resolution is {}",
                reference.height(),
                reference.width(),
                plan.resolution
            )));
        }
        let field = VolumeField::new(field_config, seed)?;
        let optimizer = stage1_optimizer(&plan, &field);
        Ok(Self {
            plan,
            seed,
            reference,
            field,
            mesh: None,
            optimizer,
            guidance_2d,
            guidance_3d,
            extra_conditions: ConditionSet::default(),
            calls_2d: 0,
            calls_3d: 0,
            iteration: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        plan: TrainPlan,
        reference: ReferenceBundle,
        guidance_2d: Box<dyn GuidanceBackend>,
        guidance_3d: Box<dyn GuidanceBackend>,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ckpt.meta.clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
        let model = TrainedModel::from_checkpoint(ckpt)?;
        let mut trainer = Self::new(plan, meta.field, reference, guidance_2d, guidance_3d, meta.seed)?;
        trainer.field = model.field;
        trainer.mesh = model.mesh;
        trainer.iteration = meta.iteration;
        trainer.calls_2d = meta.calls_2d;
        trainer.calls_3d = meta.calls_3d;
        let sizes: Vec<usize> = trainer.param_sizes();
        let mut adam = Adam::new(meta.adam_config, &sizes);
        if meta.adam_group_lr.len() != sizes.len() {
            return Err(Error::CorruptCheckpoint("optimizer group count mismatch".into()));
        }
        adam.group_lr = meta.adam_group_lr;
        adam.step = meta.adam_step;
        for g in 0..sizes.len() {
            copy_into(&mut adam.m[g], ckpt.array(&format!("adam.m.{g}"))?, "adam.m")?;
            copy_into(&mut adam.v[g], ckpt.array(&format!("adam.v.{g}"))?, "adam.v")?;
        }
        trainer.optimizer = adam;
        Ok(trainer)
    }

    /// Precomputed maps (scribble, pose, canny, ...) and text for the
    /// depth-conditioned backend.
    pub fn set_extra_conditions(&mut self, conditions: ConditionSet) {
        self.extra_conditions = conditions;
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn field(&self) -> &VolumeField {
        &self.field
    }

    pub fn mesh(&self) -> Option<&TetMesh> {
        self.mesh.as_ref()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Number of calls made to the depth-conditioned and pose-conditioned backends.
    pub fn guidance_calls(&self) -> (u64, u64) {
        (self.calls_2d, self.calls_3d)
    }

    pub fn stage(&self) -> u8 {
        if self.mesh.is_some() {
            2
        } else {
            1
        }
    }

    fn param_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = Vec::new();
        if let Some(mesh) = &self.mesh {
            sizes.extend(mesh.param_groups().iter().map(|g| g.len()));
        }
        sizes.extend(self.field.param_groups().iter().map(|g| g.len()));
        sizes
    }

    /// Generator for one iteration: the run seed on a stream chosen by the
    /// iteration, so any iteration can be replayed in isolation.
    pub fn rng_for(&self, iteration: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(iteration);
        rng
    }

    pub fn selection_for(&self, iteration: u64) -> GuidanceSelection {
        if self.mesh.is_some() {
            GuidanceSelection::BOTH
        } else {
            warmup_active(self.plan.epoch_of(iteration), self.plan.warmup_epochs)
        }
    }

    /// Hands the stage-1 field to a tetrahedral grid and resets the optimizer
    /// for the mesh and color parameters.
    pub fn begin_stage2(&mut self) -> Result<()> {
        let mesh = init_from_field(&self.field, self.plan.tet.resolution, self.plan.tet.iso_density)?;
        self.mesh = Some(mesh);
        let sizes = self.param_sizes();
        let mut adam = Adam::new(self.plan.adam.clone(), &sizes);
        for (g, lr) in adam.group_lr.iter_mut().enumerate() {
            *lr = if g < 2 {
                self.plan.stage2_geometry_lr
            } else {
                self.plan.stage2_color_lr
            };
        }
        self.optimizer = adam;
        Ok(())
    }

    /// Runs the next iteration with its own camera draw and selection.
    pub fn step(&mut self) -> Result<StepRecord> {
        let i = self.iteration;
        let mut rng = self.rng_for(i);
        let pose = sample_camera(&self.plan, i, &self.reference.pose, &mut rng)?;
        let reference_view = self.plan.is_reference_iteration(i);
        let selection = self.selection_for(i);
        self.train_step(pose, reference_view, selection, &mut rng)
    }

    /// Renders at `pose`, accumulates every active loss gradient on the
    /// render, back-propagates and applies one optimizer update.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        pose: CameraPose,
        reference_view: bool,
        selection: GuidanceSelection,
        rng: &mut R,
    ) -> Result<StepRecord> {
        let n = self.plan.resolution;
        let weights = self.plan.weights.clone();
        self.field.set_iteration(self.iteration);

        let (out, tape) = match &self.mesh {
            None => {
                let settings = RenderSettings {
                    background: self.plan.background,
                    compute_normals: self.plan.render.compute_normals && weights.lambda_n > 0.0,
                    ..self.plan.render.clone()
                };
                let (out, tape) = render_train(&self.field, &generate_rays(&pose, n, n)?, &settings, rng)?;
                (out, Tape::Volume(tape))
            }
            Some(mesh) => {
                let surface = marching_tetrahedra(mesh);
                if surface.is_empty() {
                    return Err(Error::Diverged {
                        iteration: self.iteration,
                        detail: "extracted surface is empty".into(),
                    });
                }
                let raster = RasterSettings {
                    background: self.plan.background,
                    temperature: self.plan.raster_temperature(self.iteration),
                    ..self.plan.raster.clone()
                };
                let (out, tape) = render_mesh_train(&surface, &self.field, &pose, n, n, &raster, rng)?;
                (out, Tape::Mesh(surface, tape))
            }
        };

        let mut terms = LossTerms::default();
        let mut grad = RenderGrad::zeros(n, n);
        if reference_view {
            let rec = loss_rec(&self.reference.image, &self.reference.mask, &out)?;
            terms.rec = rec.value;
            grad.image += &rec.d_image;
            grad.opacity += &rec.d_opacity;
            if weights.lambda_d > 0.0 {
                if let Some(pseudo) = &self.reference.pseudo_depth {
                    match loss_depth(&self.reference.mask, pseudo, &out.depth) {
                        Ok(d) => {
                            terms.depth = d.value;
                            grad.depth.scaled_add(weights.lambda_d, &d.d_depth);
                        }
                        Err(Error::DegenerateDepth) => {
                            log::debug!("iteration {}: degenerate depth, term skipped", self.iteration);
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        if weights.lambda_n > 0.0 {
            let normal = loss_normal(&out.normal_map, self.plan.normal_kernel)?;
            terms.normal = normal.value;
            grad.normal_map.scaled_add(weights.lambda_n, &normal.d_normal);
        }

        let delta = camera_delta(&pose, &self.reference.pose);
        let mut sds = Array3::<f64>::zeros((n, n, 3));
        let mut timestep_3d = None;
        let mut timestep_2d = None;
        if selection.use_3d {
            let cond = ConditionSet {
                image_prompt: Some(self.reference.image.clone()),
                camera_delta: Some(delta),
                ..Default::default()
            };
            let sample = sds_gradient(&out.image, self.guidance_3d.as_mut(), &cond, &self.plan.sds, rng)?;
            self.calls_3d += 1;
            timestep_3d = Some(sample.t);
            sds.scaled_add(weights.lambda_3d, &sample.grad);
        }
        if selection.use_2d {
            let cond = ConditionSet {
                image_prompt: Some(self.reference.image.clone()),
                depth_map: Some(depth_condition(&out, self.plan.depth_condition_threshold)),
                camera_delta: Some(delta),
                text: self.extra_conditions.text.clone(),
                control_maps: self.extra_conditions.control_maps.clone(),
            };
            let sample = sds_gradient(&out.image, self.guidance_2d.as_mut(), &cond, &self.plan.sds, rng)?;
            self.calls_2d += 1;
            timestep_2d = Some(sample.t);
            sds.scaled_add(weights.lambda_ip2d, &sample.grad);
        }
        let sds_grad_rms = (sds.iter().map(|g| g * g).sum::<f64>() / sds.len() as f64).sqrt();
        grad.image += &sds;

        let record = StepRecord {
            iteration: self.iteration,
            stage: self.stage(),
            epoch: self.plan.epoch_of(self.iteration),
            reference_view,
            selection,
            pose,
            terms,
            total: total_loss(&terms, &weights).unwrap_or(f64::NAN),
            timestep_2d,
            timestep_3d,
            sds_grad_rms,
        };
        let grads_finite = [&grad.image, &grad.normal_map].iter().all(|a| a.iter().all(|v| v.is_finite()))
            && [&grad.depth, &grad.opacity].iter().all(|a| a.iter().all(|v| v.is_finite()));
        if !record.total.is_finite() || !grads_finite {
            return Err(Error::Diverged {
                iteration: self.iteration,
                detail: serde_json::to_string(&record).unwrap_or_default(),
            });
        }

        match tape {
            Tape::Volume(tape) => {
                let field_grad = render_backward(&self.field, &tape, &grad)?;
                self.optimizer.step(self.field.param_groups_mut(), field_grad.groups())?;
            }
            Tape::Mesh(surface, tape) => {
                let mesh = self.mesh.as_mut().expect("stage 2 has a mesh");
                let mut field_grad = self.field.zero_grad();
                let d_positions = render_mesh_backward(&surface, &self.field, &tape, &grad, &mut field_grad)?;
                let mut d_sdf = vec![0.0; mesh.sdf.len()];
                let mut d_deform = vec![0.0; mesh.deform_raw.len()];
                marching_backward(mesh, &surface, &d_positions, &mut d_sdf, &mut d_deform);
                let mut params = mesh.param_groups_mut();
                params.extend(self.field.param_groups_mut());
                let mut grads: Vec<&[f64]> = vec![&d_sdf, &d_deform];
                grads.extend(field_grad.groups());
                self.optimizer.step(params, grads)?;
            }
        }
        self.iteration += 1;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            iteration: self.iteration,
            seed: self.seed,
            field: self.field.config().clone(),
            tet: self.mesh.as_ref().map(|m| (m.resolution(), m.bound())),
            calls_2d: self.calls_2d,
            calls_3d: self.calls_3d,
            adam_config: self.optimizer.config.clone(),
            adam_group_lr: self.optimizer.group_lr.clone(),
            adam_step: self.optimizer.step,
        };
        let mut arrays: Vec<(String, Vec<f64>)> = self
            .field
            .param_groups()
            .iter()
            .enumerate()
            .map(|(i, g)| (format!("field.{i}"), g.to_vec()))
            .collect();
        if let Some(mesh) = &self.mesh {
            arrays.push(("mesh.sdf".into(), mesh.sdf.clone()));
            arrays.push(("mesh.deform_raw".into(), mesh.deform_raw.clone()));
        }
        for (g, (m, v)) in self.optimizer.m.iter().zip(&self.optimizer.v).enumerate() {
            arrays.push((format!("adam.m.{g}"), m.clone()));
            arrays.push((format!("adam.v.{g}"), v.clone()));
        }
        Checkpoint {
            meta: serde_json::to_value(meta).expect("metadata serializes"),
            arrays,
        }
    }

    pub fn model(&self) -> TrainedModel {
        TrainedModel {
            field: self.field.clone(),
            mesh: self.mesh.clone(),
            iteration: self.iteration,
            seed: self.seed,
        }
    }

    /// Trains to the end of the plan, writing the log, a checkpoint per epoch,
    /// the stage-1 checkpoint at handoff and the colored mesh at the end. A
    /// resumed trainer keeps log lines from before its iteration.
    pub fn run(&mut self, output: &Path) -> Result<RunArtifacts> {
        std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
        let log_path = output.join(LOG_FILE);
        let checkpoint = output.join(CHECKPOINT_FILE);
        let stage1_path = output.join(STAGE1_CHECKPOINT_FILE);
        let mut log = open_log(&log_path, self.iteration)?;
        let stage1_end = self.plan.stage1_iters();
        let total = self.plan.total_iters();
        let mut records = Vec::new();
        let mut stage1_checkpoint = stage1_path.exists().then(|| stage1_path.clone());

        while self.iteration < total {
            if self.iteration == stage1_end && self.mesh.is_none() {
                save_checkpoint(&stage1_path, &self.checkpoint())?;
                stage1_checkpoint = Some(stage1_path.clone());
                self.begin_stage2()?;
                log::info!("stage 2: tet grid {} from the stage-1 field", self.plan.tet.resolution);
            }
            let record = match self.step() {
                Ok(r) => r,
                Err(e) => {
                    if let Error::Diverged { iteration, detail } = &e {
                        let dump = serde_json::json!({ "iteration": iteration, "detail": detail });
                        let path = output.join("diverged.json");
                        std::fs::write(&path, dump.to_string()).map_err(|err| Error::io(&path, err))?;
                    }
                    return Err(e);
                }
            };
            writeln!(log, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&log_path, e))?;
            records.push(record);
            if self.iteration.is_multiple_of(self.plan.iters_per_epoch as u64) {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                save_checkpoint(&checkpoint, &self.checkpoint())?;
                log::info!("epoch {} done (iteration {})", self.plan.epoch_of(self.iteration - 1), self.iteration);
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        save_checkpoint(&checkpoint, &self.checkpoint())?;
        if self.mesh.is_none() && self.iteration == stage1_end {
            save_checkpoint(&stage1_path, &self.checkpoint())?;
            stage1_checkpoint = Some(stage1_path);
        }
        let mesh = match &self.mesh {
            Some(_) => {
                let path = output.join(MESH_FILE);
                export_obj(&path, &self.model().surface(&self.plan.tet)?)?;
                Some(path)
            }
            None => None,
        };
        Ok(RunArtifacts {
            checkpoint,
            stage1_checkpoint,
            mesh,
            log: log_path,
            records,
        })
    }
}

fn stage1_optimizer(plan: &TrainPlan, field: &VolumeField) -> Adam {
    let sizes: Vec<usize> = field.param_groups().iter().map(|g| g.len()).collect();
    Adam::new(
        AdamConfig {
            lr: plan.stage1_lr,
            ..plan.adam.clone()
        },
        &sizes,
    )
}

/// Opens the log for appending after dropping lines at or past `iteration`.
fn open_log(path: &Path, iteration: u64) -> Result<std::io::BufWriter<std::fs::File>> {
    let mut kept = Vec::new();
    if iteration > 0 && path.exists() {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let record: StepRecord = serde_json::from_str(&line)?;
            if record.iteration < iteration {
                kept.push(line);
            }
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    for line in kept {
        writeln!(writer, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(writer)
}

/// Reads a training log back.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
