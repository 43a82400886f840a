"""Dual-optimizer training of the teacher and the student.

Every iteration draws a fresh synthetic anomaly for each normal image. The
teacher optimizer minimizes the sensitivity loss and the student optimizer
(bottleneck, decoder and injection modules) minimizes the denoising loss. Both
losses come from one forward pass, and their gradients are gathered before
either optimizer steps.
"""

import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union

import numpy as np
import torch
from torch.optim import Adam
from tqdm import tqdm

from .backbone import Encoder, EncoderSpec, build_expert_and_teacher, encode
from .checkpoint import read_checkpoint, write_checkpoint
from .config import RunConfig
from .data import CategoryDataset, normalize, stack_samples
from .exceptions import CheckpointCorruptError, DatasetLayoutError, TrainingDivergedError
from .logger import JsonLinesWriter, logger
from .losses import student_loss, teacher_loss_terms
from .model import StudentNet, build_student
from .scoring import pixel_auroc
from .synthesis import AnomalySynthesizer, TextureBank

LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"
TRAIN_LOG = "train_log.jsonl"


@dataclass
class LossRecord:
    """Loss components of one training iteration."""

    iteration: int
    loss_te_normal: float
    loss_te_anomalous: float
    loss_s: float
    wall_clock: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)

    def losses(self) -> Dict[str, float]:
        """The loss values alone, without timing."""
        return {
            "loss_te_normal": self.loss_te_normal,
            "loss_te_anomalous": self.loss_te_anomalous,
            "loss_s": self.loss_s,
        }


@dataclass
class TrainState:
    """Networks, optimizers and random state of a training run.

    The expert is excluded from both optimizers. ``teacher_optimizer`` is
    ``None`` when the teacher is not trained (``train.use_expert=false``).
    """

    config: RunConfig
    expert: Encoder
    teacher: Encoder
    student: StudentNet
    teacher_optimizer: Optional[Adam]
    student_optimizer: Adam
    rng: np.random.Generator
    device: torch.device
    synthesizer: Optional[AnomalySynthesizer] = None
    iteration: int = 0


def resolve_device(name: str) -> torch.device:
    """``"auto"`` picks CUDA when available, otherwise CPU."""
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def build_state(
    config: RunConfig,
    textures: Optional[TextureBank] = None,
    device: Optional[Union[str, torch.device]] = None,
    load_weights: bool = True,
    with_synthesizer: bool = True,
) -> TrainState:
    """Seed the run, build expert/teacher/student and their optimizers.

    Args:
        config: Run configuration
        textures: Texture bank; read from ``synthesis.texture_source`` if omitted
        device: Overrides ``train.device``
        load_weights: Load the configured pretrained encoder weights
        with_synthesizer: Build the anomaly synthesizer (needs textures)
    """
    train = config.train
    torch.manual_seed(train.seed)
    rng = np.random.default_rng(train.seed)
    device = torch.device(device) if device is not None else resolve_device(train.device)

    spec = EncoderSpec(
        architecture=config.model.architecture,
        pretrained_weights=config.model.pretrained_weights if load_weights else "none",
        norm_eval=config.model.teacher_norm_eval,
    )
    expert, teacher = build_expert_and_teacher(spec)
    expert, teacher = expert.to(device), teacher.to(device)
    student = build_student(config.model).to(device)
    betas = tuple(train.adam_betas)

    teacher_optimizer = None
    if train.use_expert:
        teacher_optimizer = Adam(teacher.parameters(), lr=train.teacher_lr, betas=betas)
    else:
        teacher.freeze()
    student_optimizer = Adam(student.parameters(), lr=train.student_lr, betas=betas)

    synthesizer = AnomalySynthesizer(config.synthesis, textures) if with_synthesizer else None
    return TrainState(
        config=config,
        expert=expert,
        teacher=teacher,
        student=student,
        teacher_optimizer=teacher_optimizer,
        student_optimizer=student_optimizer,
        rng=rng,
        device=device,
        synthesizer=synthesizer,
    )


def _check_finite(iteration: int, components: Dict[str, float]) -> None:
    if not all(math.isfinite(value) for value in components.values()):
        logger.error(f"Training diverged at iteration {iteration}: {components}")
        raise TrainingDivergedError(iteration, components)


def train_step(state: TrainState, batch: torch.Tensor) -> LossRecord:
    """Run one iteration on a ``B x 3 x S x S`` batch of normal images in [0, 1].

    Returns:
        Loss record of this iteration; ``state.iteration`` is advanced by one

    Raises:
        TrainingDivergedError: A loss component is NaN or infinite
    """
    if state.synthesizer is None:
        raise ValueError("train_step needs a state built with a synthesizer")
    cfg = state.config.train
    samples = state.synthesizer.synthesize_batch(batch.cpu(), state.rng)
    anomalous = torch.stack([s.anomalous_image for s in samples]).to(state.device)
    masks = torch.stack([s.mask for s in samples]).to(state.device)
    normals = batch.to(state.device)
    x_n = normalize(normals)
    x_a = normalize(anomalous)

    state.teacher.train()
    state.student.train()

    expert_n = encode(state.expert, x_n) if cfg.use_expert else None
    teacher_n = encode(state.teacher, x_n)
    teacher_a = encode(state.teacher, x_a)
    student_n = state.student(teacher_n)
    student_a = state.student(teacher_a)

    if cfg.use_expert:
        loss_te_n, loss_te_a = teacher_loss_terms(
            teacher_n, teacher_a, expert_n, masks, cfg.mask_pooling
        )
    else:
        loss_te_n = loss_te_a = torch.zeros((), device=state.device)
    loss_s = student_loss(student_n, student_a, expert_n, teacher_n)

    components = {
        "loss_te_normal": float(loss_te_n.detach()),
        "loss_te_anomalous": float(loss_te_a.detach()),
        "loss_s": float(loss_s.detach()),
    }
    _check_finite(state.iteration, components)

    if state.teacher_optimizer is not None:
        state.teacher_optimizer.zero_grad(set_to_none=True)
    state.student_optimizer.zero_grad(set_to_none=True)
    if state.teacher_optimizer is not None:
        (loss_te_n + loss_te_a).backward()
    loss_s.backward()
    if state.teacher_optimizer is not None and cfg.update_teacher:
        state.teacher_optimizer.step()
    if cfg.update_student:
        state.student_optimizer.step()

    record = LossRecord(iteration=state.iteration, wall_clock=time.time(), **components)
    state.iteration += 1
    return record


def epoch_batches(
    n_items: int, batch_size: int, rng: np.random.Generator
) -> Iterator[List[int]]:
    """Index batches of one shuffled pass over ``n_items``; the last may be short."""
    order = rng.permutation(n_items)
    for start in range(0, n_items, batch_size):
        yield [int(i) for i in order[start : start + batch_size]]


def save_checkpoint(state: TrainState, path: Union[str, Path]) -> Path:
    """Write networks, optimizer states, config, iteration and random state."""
    payload = {
        "iteration": state.iteration,
        "config": state.config.to_dict(),
        "expert": state.expert.state_dict(),
        "teacher": state.teacher.state_dict(),
        "student": state.student.state_dict(),
        "teacher_optimizer": (
            state.teacher_optimizer.state_dict() if state.teacher_optimizer is not None else None
        ),
        "student_optimizer": state.student_optimizer.state_dict(),
        "rng_state": json.dumps(state.rng.bit_generator.state),
        "torch_rng_state": torch.get_rng_state(),
    }
    return write_checkpoint(payload, state.config.model.architecture, path)


def load_checkpoint(
    path: Union[str, Path],
    expected_architecture: Optional[str] = None,
    device: Optional[Union[str, torch.device]] = None,
    textures: Optional[TextureBank] = None,
    resume: bool = False,
) -> TrainState:
    """Rebuild a :class:`TrainState` from a checkpoint.

    Args:
        path: Checkpoint file
        expected_architecture: Reject checkpoints of another architecture
        device: Target device; defaults to the stored ``train.device``
        textures: Texture bank for resumed training
        resume: Also build the anomaly synthesizer and restore random state

    Raises:
        CheckpointError: Unreadable, corrupt, versioned or mismatched checkpoint
    """
    payload = read_checkpoint(path, expected_architecture)
    config = RunConfig.from_dict(payload["config"])
    state = build_state(
        config, textures, device, load_weights=False, with_synthesizer=resume
    )
    try:
        state.expert.load_state_dict(payload["expert"])
        state.teacher.load_state_dict(payload["teacher"])
        state.student.load_state_dict(payload["student"])
        if state.teacher_optimizer is not None and payload["teacher_optimizer"] is not None:
            state.teacher_optimizer.load_state_dict(payload["teacher_optimizer"])
        state.student_optimizer.load_state_dict(payload["student_optimizer"])
    except (KeyError, RuntimeError, ValueError) as e:
        raise CheckpointCorruptError(
            f"Checkpoint state does not fit the model: {e}", str(path)
        ) from e
    state.iteration = int(payload["iteration"])
    if resume:
        state.rng.bit_generator.state = json.loads(payload["rng_state"])
        torch.set_rng_state(payload["torch_rng_state"])
    logger.info(f"Loaded checkpoint {path} at iteration {state.iteration}")
    return state


def fit(
    config: RunConfig,
    dataset: CategoryDataset,
    out_dir: Union[str, Path],
    validation: Optional[CategoryDataset] = None,
    textures: Optional[TextureBank] = None,
    state: Optional[TrainState] = None,
) -> Path:
    """Train until ``max_iterations`` or until early stopping fires.

    Args:
        config: Run configuration
        dataset: Normal training images
        out_dir: Receives ``last.pt``, ``best.pt`` (with validation) and ``train_log.jsonl``
        validation: Labelled images scored by pixel AUROC every ``eval_every`` iterations
        textures: Texture bank override
        state: Resume from this state instead of a fresh one

    Returns:
        Path of the final checkpoint
    """
    if len(dataset) == 0:
        raise DatasetLayoutError("Training split is empty", str(config.data.root_path))
    train = config.train
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = state if state is not None else build_state(config, textures)
    log = JsonLinesWriter(out_dir / TRAIN_LOG, truncate=state.iteration == 0)
    last_path = out_dir / LAST_CHECKPOINT

    validate = validation is not None and train.eval_every > 0
    best_score = -math.inf
    stale = 0
    stop = False

    logger.info(
        f"Training '{config.data.category}' for {train.max_iterations} iterations "
        f"on {len(dataset)} images ({state.device})"
    )
    progress = tqdm(total=train.max_iterations, initial=state.iteration, desc="train")
    try:
        while state.iteration < train.max_iterations and not stop:
            for indices in epoch_batches(len(dataset), train.batch_size, state.rng):
                images, _, _ = stack_samples([dataset[i] for i in indices])
                record = train_step(state, images)
                log.write(record.as_dict())
                progress.update(1)
                progress.set_postfix(loss_s=f"{record.loss_s:.4f}")

                if train.checkpoint_every and state.iteration % train.checkpoint_every == 0:
                    save_checkpoint(state, last_path)

                if validate and state.iteration % train.eval_every == 0:
                    score = pixel_auroc(
                        state.teacher,
                        state.student,
                        validation,
                        config.eval.sigma,
                        config.eval.batch_size,
                    )
                    logger.info(f"Iteration {state.iteration}: validation pixel AUROC {score:.4f}")
                    if score > best_score:
                        best_score = score
                        stale = 0
                        save_checkpoint(state, out_dir / BEST_CHECKPOINT)
                    else:
                        stale += 1
                        if train.early_stop_patience and stale >= train.early_stop_patience:
                            logger.info(f"Early stopping at iteration {state.iteration}")
                            stop = True
                            break

                if state.iteration >= train.max_iterations:
                    break
    finally:
        progress.close()

    save_checkpoint(state, last_path)
    logger.info(f"Training finished at iteration {state.iteration}; checkpoint {last_path}")
    return last_path
