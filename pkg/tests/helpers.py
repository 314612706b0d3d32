"""Shared fixtures: micro scenes and independent reference implementations."""
from __future__ import annotations

import numpy as np

from volact.fields import ActorModel, FieldConfig
from volact.numcore import Transform, rotation_about_axis
from volact.renderer import Camera, RayBatch
from volact.rootfind import RootFindConfig
from volact.skeleton import Bone, Pose, Skeleton, forward_kinematics

MICRO_FIELD = FieldConfig(skinning_layers=2, skinning_width=32, delta_layers=2, delta_width=32,
                          radiance_layers=2, radiance_width=32, ao_layers=1, ao_width=32,
                          pe_degree_coords=2, ipe_degree=3, radiance_skip=1)


def two_bone_skeleton() -> Skeleton:
    return Skeleton([
        Bone([-0.3, 0.0, 0.0], [0.0, 0.0, 0.0], None, [0.0, 0.0, 1.0]),
        Bone([0.0, 0.0, 0.0], [0.3, 0.0, 0.0], 0, [0.0, 0.0, 1.0]),
    ])


def one_bone_skeleton() -> Skeleton:
    return Skeleton([Bone([-0.3, 0.0, 0.0], [0.3, 0.0, 0.0])])


def randomize(model: ActorModel, rng: np.random.Generator, scale: float = 0.3):
    """Perturb every parameter, including zero-initialised heads."""
    model.params.values += scale * rng.standard_normal(len(model.params)) / 4
    return model


def micro_model(seed: int = 0, skeleton: Skeleton | None = None) -> tuple[ActorModel, Skeleton]:
    sk = skeleton or two_bone_skeleton()
    model = ActorModel(MICRO_FIELD, sk.B, seed=seed)
    return model, sk


def micro_camera(H: int = 8, W: int = 8) -> Camera:
    return Camera.look_at([0.0, -1.6, 0.6], [0, 0, 0], [0, 0, 1], 1.6 * W, H, W)


def micro_rays(camera: Camera, pose_index: int = 0) -> RayBatch:
    o, d, r = camera.pixel_rays()
    return RayBatch(o, d, r, np.full(len(o), pose_index, dtype=np.int64))


def bent_pose(skeleton: Skeleton, angle: float = 0.5) -> Pose:
    angles = np.zeros(skeleton.B)
    angles[-1] = angle
    return forward_kinematics(skeleton, angles)


def random_rigid(rng: np.random.Generator, t_scale: float = 1.0) -> Transform:
    axis = rng.standard_normal(3)
    return Transform(rotation_about_axis(axis, rng.uniform(-np.pi, np.pi)), t_scale * rng.standard_normal(3))


def random_pose(B: int, rng: np.random.Generator) -> Pose:
    return Pose([random_rigid(rng, 0.3) for _ in range(B)])


def loop_composite(sigma, delta, rgb):
    """Scalar-loop compositing written directly from the prefix-sum definition."""
    n = len(sigma)
    C = np.zeros(3)
    acc = 0.0
    for i in range(n):
        T = np.exp(-sum(sigma[j] * delta[j] for j in range(i)))
        w = T * (1.0 - np.exp(-sigma[i] * delta[i]))
        C += w * np.asarray(rgb[i])
        acc += w
    return C, acc


def tight_rootfind() -> RootFindConfig:
    return RootFindConfig(tol=1e-11, max_iters=30)
