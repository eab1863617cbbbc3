# %% [markdown]
# # The synthetic two-camera world
#
# An agent moves on a square arena, can close its gripper on an object and
# carry it, and a distractor circles the scene on its own schedule.  Each
# camera turns the 3-D scene into a 64-d feature vector.

# %%
import numpy as np

from mvplam import worldgen as wg

# %% [markdown]
# ## One step of the dynamics

# %%
s = wg.WorldState(agent_pos=(0.0, 0.0), agent_grip=0.0, object_pos=(0.05, 0.0), distractor_phase=0.0)
gen = np.random.default_rng(0)
s1 = wg.step_world(s, wg.ActionVec((0.1, 0.05), grip_cmd=1.0), gen)
s1

# %% [markdown]
# The object moved with the agent because the gripper closed within reach.
# The distractor phase moved too, without any help from the action.

# %% [markdown]
# ## Rendering the same state through two cameras

# %%
poses = wg.base_poses(2)
views = np.stack([wg.render_view(s1, p) for p in poses])
print(views.shape, np.linalg.norm(views[0] - views[1]))

# %% [markdown]
# ## A small dataset
#
# Half the trajectories come from a scripted reach-and-grasp expert, half
# from random play.  Hidden labels (states, actions, poses) are kept apart
# from the observations.

# %%
ds = wg.generate_dataset(wg.DatasetConfig(trajectories=20, length=10, seed=1))
print(len(ds), ds.obs.shape)
print(ds.manifest.to_text())

# %%
rec = ds.record(0)
rec.actions_raw, rec.a_net_raw

# %% [markdown]
# ## Camera perturbations
#
# Rotation noise is an axis-angle draw composed onto the quaternion,
# translation noise is isotropic Gaussian.

# %%
p = poses[0]
jittered = [wg.perturb_pose(p, 0.075, 0.03, gen) for _ in range(2000)]
offsets = np.array([np.asarray(q.position) - np.asarray(p.position) for q in jittered])
offsets.std(axis=0)

# %%
rerendered = wg.render_view(rec.s_next, wg.perturb_pose(rec.poses_next[0], 0.075, 0.03, gen))
np.linalg.norm(rerendered - rec.o_next[0])
