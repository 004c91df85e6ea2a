//! Articulated bird model: joint tree, pose parameters, forward kinematics
//! and pinhole projection, each with a hand-written adjoint.
//!
//! Joints are stored in topological order with the root at index 0. Every
//! non-root joint `j` owns a bone from its parent to itself and one
//! axis-angle rotation `θ_p[j - 1]` that rotates everything below it.
//!
//! ```text
//! G_0 = R(θ_g)                 P_0 = (κx, κy, 0)
//! G_j = G_parent · R(θ_j)      P_j = P_parent + σ · G_parent · o_j
//! keypoint k on joint j:       K_k = P_j + σ · G_j · l_k
//! ```
//!
//! Depth is not a free parameter: the camera adds its `fixed_depth` to `z`
//! at projection time.

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rotation::{axis_angle_with_jacobian, backprop_axis_angle};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    /// `None` for the root.
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointAttachment {
    pub name: String,
    pub joint: usize,
    /// Offset in the attached joint's frame, in model units.
    pub offset: [f64; 3],
}

/// The articulated template plus the statistics of the pose prior.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonModel {
    joints: Vec<Joint>,
    rest_offsets: Vec<Vector3<f64>>,
    keypoints: Vec<KeypointAttachment>,
    bone_radii: Vec<f64>,
    prior_mean: DVector<f64>,
    prior_cov_inv: DMatrix<f64>,
}

/// On-disk layout of a model (JSON).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema_version: u32,
    pub joints: Vec<Joint>,
    pub rest_offsets: Vec<[f64; 3]>,
    pub keypoints: Vec<KeypointAttachment>,
    /// One radius per non-root joint, for the bone ending at that joint.
    pub bone_radii: Vec<f64>,
    pub pose_prior_mean: Vec<f64>,
    /// Row-major, `3(J-1) × 3(J-1)`.
    pub pose_prior_cov_inv: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl SkeletonModel {
    pub fn new(
        joints: Vec<Joint>,
        rest_offsets: Vec<Vector3<f64>>,
        keypoints: Vec<KeypointAttachment>,
        bone_radii: Vec<f64>,
        prior_mean: DVector<f64>,
        prior_cov_inv: DMatrix<f64>,
    ) -> Result<Self> {
        let model = Self { joints, rest_offsets, keypoints, bone_radii, prior_mean, prior_cov_inv };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let j = self.joints.len();
        if j == 0 {
            return Err(Error::InvalidModel("model has no joints".into()));
        }
        if self.joints[0].parent.is_some() {
            return Err(Error::InvalidModel("joint 0 must be the root".into()));
        }
        for (i, joint) in self.joints.iter().enumerate().skip(1) {
            match joint.parent {
                None => return Err(Error::InvalidModel(format!("joint {i} ({}) has no parent; exactly one root is allowed", joint.name))),
                Some(p) if p >= i => return Err(Error::InvalidModel(format!("joint {i} ({}) has parent {p}; parents must precede children", joint.name))),
                _ => {}
            }
        }
        Error::check_len("rest_offsets", j, self.rest_offsets.len())?;
        Error::check_len("bone_radii", j - 1, self.bone_radii.len())?;
        if let Some(r) = self.bone_radii.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return Err(Error::InvalidModel(format!("bone radius {r} must be finite and non-negative")));
        }
        for kp in &self.keypoints {
            if kp.joint >= j {
                return Err(Error::InvalidModel(format!("keypoint {} references joint {} of {j}", kp.name, kp.joint)));
            }
        }
        let dim = self.pose_dim();
        Error::check_len("pose_prior_mean", dim, self.prior_mean.len())?;
        if self.prior_cov_inv.shape() != (dim, dim) {
            return Err(Error::DimensionMismatch {
                field: "pose_prior_cov_inv",
                expected: dim,
                actual: self.prior_cov_inv.nrows().max(self.prior_cov_inv.ncols()),
            });
        }
        if dim > 0 {
            let asym = (&self.prior_cov_inv - self.prior_cov_inv.transpose()).abs().max();
            let scale = self.prior_cov_inv.abs().max().max(1.0);
            if asym > 1e-9 * scale {
                return Err(Error::InvalidModel("pose_prior_cov_inv is not symmetric".into()));
            }
            let min_eig = self.prior_cov_inv.clone().symmetric_eigenvalues().min();
            if !(min_eig > 1e-12 * scale) {
                return Err(Error::InvalidModel(format!("pose_prior_cov_inv is not positive definite (smallest eigenvalue {min_eig:e})")));
            }
        }
        Ok(())
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.len()
    }

    pub fn keypoints(&self) -> &[KeypointAttachment] {
        &self.keypoints
    }

    pub fn rest_offsets(&self) -> &[Vector3<f64>] {
        &self.rest_offsets
    }

    /// Radius of the bone ending at non-root joint `joint`.
    pub fn bone_radius(&self, joint: usize) -> f64 {
        self.bone_radii[joint - 1]
    }

    /// Length of `θ_p`.
    pub fn pose_dim(&self) -> usize {
        3 * (self.joints.len() - 1)
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn prior_cov_inv(&self) -> &DMatrix<f64> {
        &self.prior_cov_inv
    }

    /// Pose with the prior-mean body pose, no global rotation and unit scale.
    pub fn rest_pose(&self) -> PoseParams {
        PoseParams { kappa: Vector2::zeros(), sigma: 1.0, theta_g: Vector3::zeros(), theta_p: self.prior_mean.iter().copied().collect() }
    }

    pub fn from_file(file: ModelFile) -> Result<Self> {
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::InvalidModel(format!("unsupported model schema version {} (expected {MODEL_SCHEMA_VERSION})", file.schema_version)));
        }
        let dim = file.pose_prior_mean.len();
        Error::check_len("pose_prior_cov_inv", dim, file.pose_prior_cov_inv.len())?;
        for row in &file.pose_prior_cov_inv {
            Error::check_len("pose_prior_cov_inv row", dim, row.len())?;
        }
        let cov = DMatrix::from_fn(dim, dim, |r, c| file.pose_prior_cov_inv[r][c]);
        Self::new(
            file.joints,
            file.rest_offsets.into_iter().map(Vector3::from).collect(),
            file.keypoints,
            file.bone_radii,
            DVector::from_vec(file.pose_prior_mean),
            cov,
        )
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            joints: self.joints.clone(),
            rest_offsets: self.rest_offsets.iter().map(|o| [o.x, o.y, o.z]).collect(),
            keypoints: self.keypoints.clone(),
            bone_radii: self.bone_radii.clone(),
            pose_prior_mean: self.prior_mean.iter().copied().collect(),
            pose_prior_cov_inv: self.prior_cov_inv.row_iter().map(|r| r.iter().copied().collect()).collect(),
            note: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("model serializes")
    }

    pub(crate) fn check_pose(&self, pose: &PoseParams) -> Result<()> {
        Error::check_len("theta_p", self.pose_dim(), pose.theta_p.len())?;
        if !(pose.sigma > 0.0) || !pose.sigma.is_finite() {
            return Err(Error::invalid("sigma", format!("must be positive and finite, got {}", pose.sigma)));
        }
        let finite = pose.kappa.iter().chain(pose.theta_g.iter()).chain(pose.theta_p.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("pose", "all components must be finite"));
        }
        Ok(())
    }

    /// The bundled bird-like template: a head-neck-body-tail chain, two
    /// folded wing chains and two legs, with 20 keypoints. Model `x` points
    /// from tail to beak, `y` to the bird's left, and `z` away from a camera
    /// looking down on the bird.
    ///
    /// The pose prior is a diagonal surrogate (unit inverse covariance around
    /// the rest pose), not statistics learned from data.
    pub fn default_bird() -> Self {
        let joint_spec: [(&str, Option<usize>, [f64; 3], f64); 16] = [
            ("body", None, [0.0, 0.0, 0.0], 0.0),
            ("neck", Some(0), [0.22, 0.0, -0.04], 0.085),
            ("head", Some(1), [0.14, 0.0, -0.03], 0.06),
            ("beak", Some(2), [0.12, 0.0, 0.01], 0.02),
            ("tail", Some(0), [-0.28, 0.0, 0.0], 0.1),
            ("tail_tip", Some(4), [-0.14, 0.0, 0.0], 0.04),
            ("left_shoulder", Some(0), [0.06, 0.09, -0.03], 0.05),
            ("left_elbow", Some(6), [-0.12, 0.04, 0.0], 0.04),
            ("left_wingtip", Some(7), [-0.24, 0.0, 0.0], 0.03),
            ("right_shoulder", Some(0), [0.06, -0.09, -0.03], 0.05),
            ("right_elbow", Some(9), [-0.12, -0.04, 0.0], 0.04),
            ("right_wingtip", Some(10), [-0.24, 0.0, 0.0], 0.03),
            ("left_hip", Some(0), [-0.08, 0.06, 0.07], 0.04),
            ("left_foot", Some(12), [0.06, 0.01, 0.1], 0.025),
            ("right_hip", Some(0), [-0.08, -0.06, 0.07], 0.04),
            ("right_foot", Some(14), [0.06, -0.01, 0.1], 0.025),
        ];
        let keypoint_spec: [(&str, usize, [f64; 3]); 20] = [
            ("beak_tip", 3, [0.0, 0.0, 0.0]),
            ("crown", 2, [0.0, 0.0, -0.05]),
            ("left_eye", 2, [0.04, 0.035, -0.02]),
            ("right_eye", 2, [0.04, -0.035, -0.02]),
            ("throat", 1, [0.06, 0.0, 0.04]),
            ("nape", 1, [0.0, 0.0, -0.06]),
            ("back", 0, [0.0, 0.0, -0.09]),
            ("chest", 0, [0.14, 0.0, 0.02]),
            ("tail_base", 4, [0.0, 0.0, 0.0]),
            ("tail_tip", 5, [0.0, 0.0, 0.0]),
            ("left_shoulder", 6, [0.0, 0.0, 0.0]),
            ("left_elbow", 7, [0.0, 0.0, 0.0]),
            ("left_wingtip", 8, [0.0, 0.0, 0.0]),
            ("right_shoulder", 9, [0.0, 0.0, 0.0]),
            ("right_elbow", 10, [0.0, 0.0, 0.0]),
            ("right_wingtip", 11, [0.0, 0.0, 0.0]),
            ("left_hip", 12, [0.0, 0.0, 0.0]),
            ("left_foot", 13, [0.0, 0.0, 0.0]),
            ("right_hip", 14, [0.0, 0.0, 0.0]),
            ("right_foot", 15, [0.0, 0.0, 0.0]),
        ];
        let joints = joint_spec.iter().map(|(name, parent, _, _)| Joint { name: (*name).into(), parent: *parent }).collect();
        let rest_offsets = joint_spec.iter().map(|(_, _, o, _)| Vector3::from(*o)).collect();
        let bone_radii = joint_spec.iter().skip(1).map(|(_, _, _, r)| *r).collect();
        let keypoints = keypoint_spec.iter().map(|(name, joint, offset)| KeypointAttachment { name: (*name).into(), joint: *joint, offset: *offset }).collect();
        let dim = 3 * (joint_spec.len() - 1);
        Self::new(joints, rest_offsets, keypoints, bone_radii, DVector::zeros(dim), DMatrix::identity(dim, dim)).expect("bundled model is valid")
    }
}

/// Per-frame optimization variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    /// Root translation in the camera plane (camera units).
    pub kappa: Vector2<f64>,
    /// Common bone scale.
    pub sigma: f64,
    /// Global orientation, axis-angle.
    pub theta_g: Vector3<f64>,
    /// Body pose, one axis-angle triple per non-root joint.
    pub theta_p: Vec<f64>,
}

impl PoseParams {
    pub fn joint_rotation(&self, joint: usize) -> Vector3<f64> {
        let i = 3 * (joint - 1);
        Vector3::new(self.theta_p[i], self.theta_p[i + 1], self.theta_p[i + 2])
    }
}

/// Gradient of a scalar with respect to a [`PoseParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGradient {
    pub kappa: Vector2<f64>,
    pub sigma: f64,
    pub theta_g: Vector3<f64>,
    pub theta_p: Vec<f64>,
}

impl PoseGradient {
    pub fn zeros(pose_dim: usize) -> Self {
        Self { kappa: Vector2::zeros(), sigma: 0.0, theta_g: Vector3::zeros(), theta_p: vec![0.0; pose_dim] }
    }

    pub fn add_scaled(&mut self, other: &PoseGradient, s: f64) {
        self.kappa += other.kappa * s;
        self.sigma += other.sigma * s;
        self.theta_g += other.theta_g * s;
        for (a, b) in self.theta_p.iter_mut().zip(&other.theta_p) {
            *a += b * s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.kappa.iter().chain(self.theta_g.iter()).chain(self.theta_p.iter()).all(|v| v.is_finite()) && self.sigma.is_finite()
    }
}

/// Pinhole camera looking along `+z`; the bird root sits at `fixed_depth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub focal: f64,
    pub principal: [f64; 2],
    pub fixed_depth: f64,
    /// `(width, height)` in pixels.
    pub image_size: (usize, usize),
}

impl Default for Camera {
    /// The normalized 256×256 crop camera.
    fn default() -> Self {
        Self { focal: 1500.0, principal: [128.0, 128.0], fixed_depth: 10.0, image_size: (256, 256) }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::invalid("focal", format!("must be positive, got {}", self.focal)));
        }
        if !(self.fixed_depth > 0.0) {
            return Err(Error::invalid("fixed_depth", format!("must be positive, got {}", self.fixed_depth)));
        }
        Ok(())
    }

    /// Pixels per model unit at the root depth.
    pub fn pixels_per_unit(&self) -> f64 {
        self.focal / self.fixed_depth
    }

    /// Camera-plane translation placing the root at pixel `p`.
    pub fn kappa_for_pixel(&self, p: Vector2<f64>) -> Vector2<f64> {
        Vector2::new(p.x - self.principal[0], p.y - self.principal[1]) / self.pixels_per_unit()
    }
}

/// Forward-kinematics output, including the per-joint global rotations
/// needed by the adjoint.
#[derive(Debug, Clone)]
pub struct Posed {
    pub joints: Vec<Vector3<f64>>,
    pub keypoints: Vec<Vector3<f64>>,
    global: Vec<Matrix3<f64>>,
    local: Vec<Matrix3<f64>>,
    local_jac: Vec<[Matrix3<f64>; 3]>,
}

/// Joint and keypoint positions (root-plane coordinates, depth excluded).
pub fn forward_kinematics(model: &SkeletonModel, pose: &PoseParams) -> Result<Posed> {
    model.check_pose(pose)?;
    Ok(fk_unchecked(model, pose))
}

pub(crate) fn fk_unchecked(model: &SkeletonModel, pose: &PoseParams) -> Posed {
    let n = model.num_joints();
    let mut global = Vec::with_capacity(n);
    let mut local = Vec::with_capacity(n);
    let mut local_jac = Vec::with_capacity(n);
    let mut joints = Vec::with_capacity(n);
    for (j, joint) in model.joints.iter().enumerate() {
        let theta = if j == 0 { pose.theta_g } else { pose.joint_rotation(j) };
        let (r, jac) = axis_angle_with_jacobian(&theta);
        match joint.parent {
            None => {
                joints.push(Vector3::new(pose.kappa.x, pose.kappa.y, 0.0));
                global.push(r);
            }
            Some(p) => {
                let g_parent: Matrix3<f64> = global[p];
                joints.push(joints[p] + g_parent * model.rest_offsets[j] * pose.sigma);
                global.push(g_parent * r);
            }
        }
        local.push(r);
        local_jac.push(jac);
    }
    let keypoints = model.keypoints.iter().map(|kp| joints[kp.joint] + global[kp.joint] * Vector3::from(kp.offset) * pose.sigma).collect();
    Posed { joints, keypoints, global, local, local_jac }
}

/// Adjoint of [`forward_kinematics`]: maps `∂L/∂joints` and `∂L/∂keypoints`
/// to `∂L/∂pose`. Either slice may be empty, meaning zero.
pub fn fk_backward(model: &SkeletonModel, pose: &PoseParams, posed: &Posed, grad_joints: &[Vector3<f64>], grad_keypoints: &[Vector3<f64>]) -> PoseGradient {
    let n = model.num_joints();
    let mut g_pos: Vec<Vector3<f64>> = if grad_joints.is_empty() { vec![Vector3::zeros(); n] } else { grad_joints.to_vec() };
    let mut g_rot = vec![Matrix3::<f64>::zeros(); n];
    let mut out = PoseGradient::zeros(model.pose_dim());

    for (kp, g) in model.keypoints.iter().zip(grad_keypoints) {
        let offset = Vector3::from(kp.offset);
        g_pos[kp.joint] += g;
        g_rot[kp.joint] += g * offset.transpose() * pose.sigma;
        out.sigma += (posed.global[kp.joint] * offset).dot(g);
    }

    for j in (1..n).rev() {
        let p = model.joints[j].parent.expect("non-root joint has a parent");
        let g_parent = posed.global[p];
        let offset = model.rest_offsets[j];
        let gp = g_pos[j];
        g_pos[p] += gp;
        out.sigma += (g_parent * offset).dot(&gp);
        let mut acc = gp * offset.transpose() * pose.sigma;
        // G_j = G_p · R_j
        acc += g_rot[j] * posed.local[j].transpose();
        g_rot[p] += acc;
        let grad_local = g_parent.transpose() * g_rot[j];
        let gv = backprop_axis_angle(&posed.local_jac[j], &grad_local);
        out.theta_p[3 * (j - 1)..3 * j].copy_from_slice(gv.as_slice());
    }

    out.kappa = Vector2::new(g_pos[0].x, g_pos[0].y);
    out.theta_g = backprop_axis_angle(&posed.local_jac[0], &g_rot[0]);
    out
}

/// Pinhole projection of root-plane points; `fixed_depth` is added to `z`.
pub fn project(camera: &Camera, points: &[Vector3<f64>]) -> Result<Vec<Vector2<f64>>> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let z = p.z + camera.fixed_depth;
            if !(z > 0.0) {
                return Err(Error::NonPositiveDepth { index, depth: z });
            }
            Ok(project_point(camera, p))
        })
        .collect()
}

#[inline]
pub(crate) fn project_point(camera: &Camera, p: &Vector3<f64>) -> Vector2<f64> {
    let z = p.z + camera.fixed_depth;
    Vector2::new(camera.focal * p.x / z + camera.principal[0], camera.focal * p.y / z + camera.principal[1])
}

/// Adjoint of [`project`] for one point.
#[inline]
pub fn project_backward(camera: &Camera, p: &Vector3<f64>, grad: &Vector2<f64>) -> Vector3<f64> {
    let z = p.z + camera.fixed_depth;
    let f = camera.focal / z;
    Vector3::new(f * grad.x, f * grad.y, -f * (p.x * grad.x + p.y * grad.y) / z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::axis_angle_to_matrix;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain3() -> SkeletonModel {
        let joints = vec![Joint { name: "a".into(), parent: None }, Joint { name: "b".into(), parent: Some(0) }, Joint { name: "c".into(), parent: Some(1) }];
        SkeletonModel::new(
            joints,
            vec![Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 2.0, 0.0)],
            vec![KeypointAttachment { name: "tip".into(), joint: 2, offset: [0.5, 0.0, 0.0] }],
            vec![0.1, 0.1],
            DVector::zeros(6),
            DMatrix::identity(6, 6),
        )
        .unwrap()
    }

    fn random_pose(model: &SkeletonModel, rng: &mut ChaCha8Rng) -> PoseParams {
        PoseParams {
            kappa: Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            sigma: rng.gen_range(0.5..1.5),
            theta_g: Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
            theta_p: (0..model.pose_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn identity_pose_gives_cumulative_offsets() {
        let model = SkeletonModel::default_bird();
        let posed = forward_kinematics(&model, &model.rest_pose()).unwrap();
        for (j, joint) in model.joints().iter().enumerate() {
            let mut expect = Vector3::zeros();
            let mut cur = Some(j);
            while let Some(c) = cur {
                expect += model.rest_offsets()[c];
                cur = model.joints()[c].parent;
            }
            assert!((posed.joints[j] - expect).norm() < 1e-15, "joint {}", joint.name);
        }
    }

    #[test]
    fn sigma_scales_root_relative_positions() {
        let model = SkeletonModel::default_bird();
        let mut pose = model.rest_pose();
        let one = forward_kinematics(&model, &pose).unwrap();
        pose.sigma = 2.0;
        let two = forward_kinematics(&model, &pose).unwrap();
        for (a, b) in one.joints.iter().zip(&two.joints) {
            assert_eq!(*b, a * 2.0);
        }
        pose.kappa = Vector2::new(0.3, -0.2);
        pose.theta_g = Vector3::new(0.3, 0.1, -1.0);
        pose.sigma = 1.0;
        let one = forward_kinematics(&model, &pose).unwrap();
        pose.sigma = 2.0;
        let two = forward_kinematics(&model, &pose).unwrap();
        for (a, b) in one.joints.iter().zip(&two.joints) {
            assert!(((b - two.joints[0]) - (a - one.joints[0]) * 2.0).norm() < 1e-15);
        }
    }

    /// Hand-composed rotations for a 3-joint chain with an end keypoint.
    #[test]
    fn three_joint_chain_matches_hand_composition() {
        let model = chain3();
        let pose = PoseParams {
            kappa: Vector2::new(0.25, -0.5),
            sigma: 1.5,
            theta_g: Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            theta_p: vec![0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0],
        };
        let posed = forward_kinematics(&model, &pose).unwrap();
        // Root yawed 90°: bone a→b along +x becomes +y, scaled 1.5.
        let b = Vector3::new(0.25, -0.5 + 1.5, 0.0);
        // b adds another 90°: bone b→c along +y becomes -y after 180° total.
        let c = b + Vector3::new(0.0, -3.0, 0.0);
        // Keypoint offset +x in c's frame (180° total yaw) points along -x.
        let tip = c + Vector3::new(-0.75, 0.0, 0.0);
        assert!((posed.joints[1] - b).norm() < 1e-12);
        assert!((posed.joints[2] - c).norm() < 1e-12);
        assert!((posed.keypoints[0] - tip).norm() < 1e-12);
    }

    #[test]
    fn three_joint_chain_random_pose_matches_nalgebra_composition() {
        let model = chain3();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let pose = random_pose(&model, &mut rng);
            let posed = forward_kinematics(&model, &pose).unwrap();
            let r0 = Rotation3::new(pose.theta_g);
            let r1 = Rotation3::new(pose.joint_rotation(1));
            let r2 = Rotation3::new(pose.joint_rotation(2));
            let root = Vector3::new(pose.kappa.x, pose.kappa.y, 0.0);
            let b = root + r0 * (Vector3::new(1.0, 0.0, 0.0) * pose.sigma);
            let c = b + (r0 * r1) * (Vector3::new(0.0, 2.0, 0.0) * pose.sigma);
            let tip = c + (r0 * r1 * r2) * (Vector3::new(0.5, 0.0, 0.0) * pose.sigma);
            assert!((posed.joints[1] - b).norm() < 1e-12);
            assert!((posed.joints[2] - c).norm() < 1e-12);
            assert!((posed.keypoints[0] - tip).norm() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_names_field() {
        let model = SkeletonModel::default_bird();
        let mut pose = model.rest_pose();
        pose.theta_p.pop();
        match forward_kinematics(&model, &pose) {
            Err(Error::DimensionMismatch { field, .. }) => assert_eq!(field, "theta_p"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn projection_examples() {
        let cam = Camera { focal: 100.0, principal: [0.0, 0.0], fixed_depth: 10.0, image_size: (10, 10) };
        let p = project(&cam, &[Vector3::new(1.0, 2.0, 0.0)]).unwrap();
        assert_eq!(p[0], Vector2::new(10.0, 20.0));
        let cam = Camera::default();
        for depth in [-5.0, 0.0, 3.0, 100.0] {
            let p = project(&cam, &[Vector3::new(0.0, 0.0, depth)]).unwrap();
            assert_eq!(p[0], Vector2::new(128.0, 128.0));
        }
    }

    #[test]
    fn projection_rejects_points_behind_camera() {
        let cam = Camera::default();
        let pts = [Vector3::new(0.0, 0.0, 0.0), Vector3::new(0.0, 0.0, -10.0)];
        match project(&cam, &pts) {
            Err(Error::NonPositiveDepth { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn projection_batch_matches_scalar_loop() {
        let cam = Camera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<_> = (0..50).map(|_| Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0))).collect();
        let batch = project(&cam, &pts).unwrap();
        for (p, q) in pts.iter().zip(&batch) {
            let z = p.z + cam.fixed_depth;
            let u = cam.focal * p.x / z + cam.principal[0];
            let v = cam.focal * p.y / z + cam.principal[1];
            assert_eq!(q.x, u);
            assert_eq!(q.y, v);
        }
    }

    #[test]
    fn model_json_roundtrip_and_validation() {
        let model = SkeletonModel::default_bird();
        let back = SkeletonModel::from_json(&model.to_json()).unwrap();
        assert_eq!(back, model);

        let mut file = model.to_file();
        file.joints[3].parent = Some(5);
        assert!(matches!(SkeletonModel::from_file(file), Err(Error::InvalidModel(_))));

        let mut file = model.to_file();
        file.keypoints[0].joint = 99;
        assert!(SkeletonModel::from_file(file).is_err());

        let mut file = model.to_file();
        file.pose_prior_cov_inv[0][0] = -1.0;
        assert!(SkeletonModel::from_file(file).is_err());

        let mut file = model.to_file();
        file.pose_prior_cov_inv[0][1] = 0.5;
        assert!(SkeletonModel::from_file(file).is_err());

        let mut file = model.to_file();
        file.joints[2].parent = None;
        assert!(SkeletonModel::from_file(file).is_err());
    }

    fn scalar_of(model: &SkeletonModel, cam: &Camera, pose: &PoseParams, weights: &[Vector2<f64>]) -> f64 {
        let posed = forward_kinematics(model, pose).unwrap();
        let pts: Vec<_> = posed.joints.iter().chain(&posed.keypoints).copied().collect();
        project(cam, &pts).unwrap().iter().zip(weights).map(|(p, w)| p.dot(w)).sum()
    }

    fn perturb(pose: &PoseParams, i: usize, h: f64) -> PoseParams {
        let mut p = pose.clone();
        match i {
            0 | 1 => p.kappa[i] += h,
            2 => p.sigma += h,
            3..=5 => p.theta_g[i - 3] += h,
            _ => p.theta_p[i - 6] += h,
        }
        p
    }

    fn flat(g: &PoseGradient) -> Vec<f64> {
        let mut v = vec![g.kappa.x, g.kappa.y, g.sigma, g.theta_g.x, g.theta_g.y, g.theta_g.z];
        v.extend(&g.theta_p);
        v
    }

    #[test]
    fn projected_fk_gradient_matches_finite_differences() {
        let model = SkeletonModel::default_bird();
        let cam = Camera::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let pose = random_pose(&model, &mut rng);
            let n = model.num_joints() + model.num_keypoints();
            let weights: Vec<_> = (0..n).map(|_| Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let posed = forward_kinematics(&model, &pose).unwrap();
            let upstream: Vec<_> = posed.joints.iter().chain(&posed.keypoints).zip(&weights).map(|(p, w)| project_backward(&cam, p, w)).collect();
            let (gj, gk) = upstream.split_at(model.num_joints());
            let grad = flat(&fk_backward(&model, &pose, &posed, gj, gk));
            let h = 1e-5;
            let fd: Vec<f64> = (0..grad.len())
                .map(|i| (scalar_of(&model, &cam, &perturb(&pose, i, h), &weights) - scalar_of(&model, &cam, &perturb(&pose, i, -h), &weights)) / (2.0 * h))
                .collect();
            let err: f64 = grad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err / norm < 1e-4, "relative error {}", err / norm);
        }
    }

    proptest! {
        #[test]
        fn global_rotation_equivariance(ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in -1.0..1.0f64, seed in 0u64..1000) {
            let model = SkeletonModel::default_bird();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pose = random_pose(&model, &mut rng);
            pose.theta_g = Vector3::zeros();
            let base = forward_kinematics(&model, &pose).unwrap();
            let v = Vector3::new(ax, ay, az);
            pose.theta_g = v;
            let rotated = forward_kinematics(&model, &pose).unwrap();
            let r = axis_angle_to_matrix(&v);
            for (a, b) in base.joints.iter().zip(&rotated.joints) {
                let expect = r * (a - base.joints[0]);
                let got = b - rotated.joints[0];
                prop_assert!((expect - got).norm() <= 1e-9 * expect.norm().max(1.0));
            }
        }

        #[test]
        fn fk_is_lipschitz_in_parameters(seed in 0u64..1000, which in 0usize..51) {
            let model = SkeletonModel::default_bird();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pose = random_pose(&model, &mut rng);
            let base = forward_kinematics(&model, &pose).unwrap();
            for eps in [1e-3, 1e-5, 1e-7] {
                let moved = forward_kinematics(&model, &perturb(&pose, which, eps)).unwrap();
                let delta = base.joints.iter().zip(&moved.joints).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
                // Slope bounded by the model extent (~1.5 units) times sigma.
                prop_assert!(delta / eps < 10.0);
            }
        }
    }
}
