import numpy as np
import pytest

from planact.trajectory import Action, Episode, Observation


def make_episode(deltas, grippers, ep_id="ep0", instruction="move the block",
                 aux=None, grid=8):
    """Build a valid episode from raw action arrays; images are blank grids."""
    deltas = np.asarray(deltas, dtype=float)
    T = deltas.shape[0] - 1
    observations = [
        Observation(timestep=t, image=np.zeros((grid, grid), dtype=np.int16))
        for t in range(T + 1)
    ]
    actions = []
    for t in range(T + 1):
        a = np.zeros(0) if aux is None else np.asarray(aux[t], dtype=float)
        actions.append(
            Action(delta=deltas[t].copy(), gripper=float(grippers[t]), aux=a)
        )
    return Episode(id=ep_id, instruction=instruction,
                   observations=observations, actions=actions)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_pipeline():
    """Expert episodes, keysteps, fitted codecs, and a toy-scale config.

    Shared by the experiment/server/CLI tests; everything is sized so a
    full train+eval cycle stays in the low seconds.
    """
    from planact.config import merge_config
    from planact.keysteps import ExtractorConfig, extract_keysteps
    from planact.sim import ExpertConfig, TaskSpec, reset, scripted_expert
    from planact.tokens import fit_codec_bundle

    task = TaskSpec("single")
    episodes, logs = [], []
    for i in range(6):
        state, instr = reset(task, seed=i)
        ep, log = scripted_expert(state, instr, task, noise_seed=i,
                                  expert=ExpertConfig(sigma=0.01))
        episodes.append(ep)
        logs.append(log)
    pairs = [(ep, extract_keysteps(ep, ExtractorConfig())) for ep in episodes]
    codecs = fit_codec_bundle(episodes, lang_size=32, vision_k=16,
                              vision_iters=8, horizon=4, chunk_stride=2,
                              seed=0)
    cfg = merge_config({
        "build.history": 2,
        "build.horizon": 4,
        "build.slide": 2,
        "train.d_model": 16,
        "train.n_layers": 1,
        "train.n_heads": 2,
        "train.d_ff": 32,
        "train.maxlen": 192,
        "train.batch_size": 4,
        "train.warmup": 2,
        "train.lr": 0.01,
        "experiment.steps1": 6,
        "experiment.steps2": 6,
        "experiment.eval_every": 6,
        "experiment.trials": 2,
        "eval.max_steps": 10,
    })
    return {"episodes": episodes, "logs": logs, "pairs": pairs,
            "codecs": codecs, "cfg": cfg}
