"""Joint teacher-forced optimization of the agent and vision networks, checkpoints and evaluation."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .agent import AgentConfig, AgentNet, Vocabulary, append_feedback, build_vocab, initial_state
from .runtime import Env, Executor, ModelPolicy, OraclePolicy, Volume, agent_loop, embed_feedback, parse, step_token_ids
from .taskgen import TaskInstance, default_grammar, make_task, task_corpus
from .taskgen.tasks import resample_prompt
from .tensor import DTensor, backward, no_grad, ops
from .tensor.optim import Adam
from .visionnet import NetConfig, VisionNet
from .voxelcore import BinaryMask, VoxelGrid, dice, resample_to, write_volume

UNBOUNDED = 1 << 30


class TrainingError(RuntimeError):
    """Ground truth failed to execute, or the loss diverged."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    accumulation: int = 10
    lam: float = 0.1
    bce: float = 0.0  # optional logit-space BCE added to each soft Dice term
    clip: float = 0.0  # global gradient-norm cap per update; 0 disables
    patience: int = 500
    max_halvings: int = 4
    seed: int = 0
    max_updates: int = 1000
    task_mix: dict = field(default_factory=lambda: {"segment": 1.0, "classify_intensity": 1.0})
    n_train: int = 64
    resample_prompts: bool = True
    checkpoint_every: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.lam < 0 or self.bce < 0 or self.clip < 0:
            raise ValueError("lam, bce and clip must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.accumulation < 1:
            raise ValueError("accumulation must be at least 1")


@dataclass
class Models:
    agent: AgentNet
    vision: VisionNet
    vocab: Vocabulary

    def params(self) -> dict[str, DTensor]:
        out = {f"agent.{k}": v for k, v in self.agent.params.items()}
        out.update({f"vision.{k}": v for k, v in self.vision.params.items()})
        return out

    def fingerprint(self) -> str:
        blob = json.dumps(
            {"agent": asdict(self.agent.config), "vision": asdict(self.vision.config), "vocab": self.vocab.size},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_models(vocab: Vocabulary, agent_config: AgentConfig | None = None, net_config: NetConfig | None = None, seed: int = 0) -> Models:
    acfg = agent_config or AgentConfig()
    ncfg = net_config or NetConfig(summary_dim=acfg.d_model, phi_dim=acfg.phi_dim)
    if ncfg.summary_dim != acfg.d_model or ncfg.phi_dim != acfg.phi_dim:
        raise ValueError("vision summary_dim/phi_dim must match the agent's d_model/phi_dim")
    return Models(AgentNet(vocab.size, acfg, seed=seed), VisionNet(ncfg, seed=seed + 1), vocab)


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossTerms:
    ce: DTensor
    imgs: list
    total: DTensor
    correct: int
    tokens: int
    generated: list = field(default_factory=list)  # (GenOutput, oracle index)

    @property
    def token_accuracy(self) -> float:
        return self.correct / self.tokens if self.tokens else 1.0


def _mask_grid(mask: BinaryMask) -> VoxelGrid:
    return VoxelGrid(mask.as_float(), mask.affine)


def _target_on(mask: BinaryMask, reference) -> np.ndarray:
    if mask.same_geometry(reference):
        return mask.values.astype(np.float32)
    return (resample_to(_mask_grid(mask), reference).values > 0.5).astype(np.float32)


def teacher_forced_losses(models: Models, task: TaskInstance, lam: float = 0.1, prompt: str | None = None, bce: float = 0.0) -> LossTerms:
    """Joint token cross-entropy plus weighted image losses for one instance.

    The agent reads the ground-truth program one step at a time. Each step
    is a causal forward over ``mu || eta``; because attention is causal this
    equals slicing one forward over the whole sequence, but it lets the
    phi vectors of step i drive execution before z_i is appended. Feedback
    comes from executing phi* with the oracle masks, while encodings carry
    the differentiable summary vectors of the current vision network.
    """
    vocab, net = models.vocab, models.agent
    mu = initial_state(prompt or task.prompt, [(v.name, v.modality, v.date) for v in task.volumes], vocab)
    env = Env({v.name: Volume(v.grid, v.name) for v in task.volumes})
    ex = Executor(models.vision, oracle_masks=task.masks)
    logit_parts, targets, imgs, generated = [], [], [], []
    for code in task.steps:
        eta = step_token_ids(code, vocab)
        n0 = len(mu)
        h = net.forward(net.embed_state(append_feedback(mu, eta, (), max_len=UNBOUNDED)))
        logit_parts.append(net.logits(ops.getitem(h, slice(n0 - 1, n0 + len(eta) - 1))))
        targets.extend(eta)
        mod_pos = [n0 + j for j, t in enumerate(eta) if t == vocab.mod_id]
        phis = []
        if mod_pos:
            phi_all = net.phi_head(ops.getitem(h, np.asarray(mod_pos)))
            phis = [ops.getitem(phi_all, k) for k in range(len(mod_pos))]
        outcome = ex.execute(parse(code), env, phis)
        if not outcome.ok:
            raise TrainingError(f"ground-truth program failed to execute: {outcome.error}")
        for gen, k in outcome.generated:
            target = _target_on(task.masks[k], gen.reference)
            li = ops.soft_dice_loss(gen.prob, target)
            if bce:
                # soft Dice alone has no gradient once the sigmoid saturates at 0
                li = ops.add(li, ops.mul(ops.sigmoid_bce(gen.logit, target), bce))
            imgs.append(li)
            generated.append((gen, k))
        block = embed_feedback(outcome.feedback, vocab)
        mu = append_feedback(mu, eta, block.segments, max_len=UNBOUNDED)
    logits = ops.concat(logit_parts, axis=0)
    tgt = np.asarray(targets)
    ce = ops.cross_entropy(logits, tgt)
    correct = int((np.argmax(logits.data, axis=-1) == tgt).sum())
    total = ce
    for li in imgs:
        total = ops.add(total, ops.mul(li, lam))
    return LossTerms(ce, imgs, total, correct, len(tgt), generated)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class PlateauSchedule:
    """Halve the learning rate after ``patience`` updates without a new best loss."""

    lr: float
    patience: int
    max_halvings: int = 4
    best: float = float("inf")
    since: int = 0
    halvings: int = 0
    stopped: bool = False

    def update(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.since = 0
        else:
            self.since += 1
        if self.since >= self.patience:
            self.since = 0
            if self.halvings >= self.max_halvings:
                self.stopped = True
            else:
                self.lr *= 0.5
                self.halvings += 1
        return self.lr


@dataclass
class TrainResult:
    models: Models
    optimizer: Adam
    history: list[dict]
    updates: int
    schedule: PlateauSchedule


def sample_tasks(task_mix: dict, n: int, seed: int, grammar=None, task_config=None) -> list[TaskInstance]:
    """``n`` seed-ordered instances drawn from ``task_mix`` (kind -> weight)."""
    kinds = sorted(task_mix)
    w = np.asarray([task_mix[k] for k in kinds], dtype=float)
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(kinds), size=n, p=w / w.sum())
    return [make_task(kinds[int(k)], seed * 1_000_003 + i, grammar, task_config) for i, k in enumerate(picks)]


def default_tasks(config: TrainConfig, grammar=None, task_config=None) -> list[TaskInstance]:
    return sample_tasks(config.task_mix, config.n_train, config.seed, grammar, task_config)


def vocab_for(tasks: list[TaskInstance], max_size: int = 512, grammar=None) -> Vocabulary:
    return build_vocab(task_corpus(tasks, grammar or default_grammar()), max_size=max_size)


def train(
    config: TrainConfig,
    tasks: list[TaskInstance] | None = None,
    models: Models | None = None,
    agent_config: AgentConfig | None = None,
    net_config: NetConfig | None = None,
    out_dir=None,
    log=None,
) -> TrainResult:
    """Batch size one with gradient accumulation, Adam, plateau halving."""
    grammar = default_grammar()
    tasks = tasks if tasks is not None else default_tasks(config, grammar)
    if not tasks:
        raise TrainingError("no training instances")
    if models is None:
        models = build_models(vocab_for(tasks, grammar=grammar), agent_config, net_config, seed=config.seed)
    params = models.params()
    opt = Adam(params, lr=config.lr)
    sched = PlateauSchedule(config.lr, config.patience, config.max_halvings)
    rng = np.random.default_rng(config.seed + 17)
    order: list[int] = []
    history = []
    out = Path(out_dir) if out_dir else None
    update = 0
    while update < config.max_updates and not sched.stopped:
        opt.zero_grad()
        ce_sum = img_sum = tot_sum = 0.0
        correct = count = 0
        for _ in range(config.accumulation):
            if not order:
                order = list(rng.permutation(len(tasks)))
            task = tasks[order.pop()]
            prompt = resample_prompt(task, rng, grammar) if config.resample_prompts else None
            terms = teacher_forced_losses(models, task, config.lam, prompt, config.bce)
            tv = float(terms.total.data)
            if not np.isfinite(tv):
                _dump_divergence(out, update, task, terms)
                raise TrainingError(f"non-finite loss at update {update} on task seed {task.seed}")
            backward(terms.total)
            ce_sum += float(terms.ce.data)
            img_sum += sum(float(li.data) for li in terms.imgs)
            tot_sum += tv
            correct += terms.correct
            count += terms.tokens
        gnorm = opt.step(scale=1.0 / config.accumulation, clip=config.clip)
        update += 1
        n = config.accumulation
        rec = {
            "update": update,
            "loss": tot_sum / n,
            "ce": ce_sum / n,
            "img": img_sum / n,
            "token_acc": correct / max(count, 1),
            "grad_norm": gnorm,
            "lr": opt.lr,
        }
        history.append(rec)
        opt.lr = sched.update(rec["loss"])
        if log is not None and (update % config.log_every == 0 or update == 1):
            log(rec)
        if out is not None and config.checkpoint_every and update % config.checkpoint_every == 0:
            save_checkpoint(out / f"ckpt_{update:06d}.vxck", models, opt, update, config)
    return TrainResult(models, opt, history, update, sched)


def _dump_divergence(out, update, task, terms):
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    info = {
        "update": update,
        "task_seed": task.seed,
        "kind": task.kind,
        "prompt": task.prompt,
        "ce": float(terms.ce.data),
        "img": [float(li.data) for li in terms.imgs],
    }
    (out / "divergence.json").write_text(json.dumps(info, indent=2))


# ---------------------------------------------------------------------------
# checkpoints: magic, u64 header length, JSON header, little-endian f32 payload

MAGIC = b"VXCKPT01"


def save_checkpoint(path, models: Models, optimizer: Adam | None = None, step: int = 0, config: TrainConfig | None = None) -> Path:
    arrays: list[tuple[str, np.ndarray]] = [(k, p.data) for k, p in models.params().items()]
    if optimizer is not None:
        for k in models.params():
            if k in optimizer.state.m:
                arrays.append((f"adam.m.{k}", optimizer.state.m[k]))
                arrays.append((f"adam.v.{k}", optimizer.state.v[k]))
    entries, offset, chunks = [], 0, []
    for name, a in arrays:
        b = np.ascontiguousarray(a, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(b)
        offset += len(b)
    header = {
        "fingerprint": models.fingerprint(),
        "agent_config": asdict(models.agent.config),
        "net_config": asdict(models.vision.config),
        "vocab": models.vocab.tokens,
        "step": step,
        "train_config": asdict(config) if config is not None else None,
        "adam": {"t": optimizer.state.t, "lr": optimizer.lr} if optimizer is not None else None,
        "tensors": entries,
    }
    hb = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks))
    return path


@dataclass
class Checkpoint:
    models: Models
    step: int
    header: dict
    adam: dict  # name -> (m, v)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen])
    payload = memoryview(data)[16 + hlen :]
    vocab = Vocabulary(header["vocab"])
    models = build_models(vocab, AgentConfig(**header["agent_config"]), NetConfig(**header["net_config"]))
    if models.fingerprint() != header["fingerprint"]:
        raise CheckpointError("config fingerprint mismatch")
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64)) * 4
        if e["offset"] + n > len(payload):
            raise CheckpointError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(payload[e["offset"] : e["offset"] + n], dtype="<f4").reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)
    params = models.params()
    for k, p in params.items():
        if k not in tensors:
            raise CheckpointError(f"missing tensor {k}")
        p.data = tensors[k].copy()
    adam = {k: (tensors[f"adam.m.{k}"], tensors[f"adam.v.{k}"]) for k in params if f"adam.m.{k}" in tensors}
    return Checkpoint(models, header["step"], header, adam)


def restore_optimizer(ckpt: Checkpoint) -> Adam:
    opt = Adam(ckpt.models.params(), lr=(ckpt.header.get("adam") or {}).get("lr", 1e-4))
    for k, (m, v) in ckpt.adam.items():
        opt.state.m[k] = m.copy()
        opt.state.v[k] = v.copy()
    opt.state.t = (ckpt.header.get("adam") or {}).get("t", 0)
    return opt


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class TaskResult:
    kind: str
    dice: list[float]
    token_acc: float
    tokens: int
    answer_match: bool
    valid: bool
    answer: str | None
    expected: str | None
    transcript: object = None


def _pred_vs_truth(pred: BinaryMask, truth: BinaryMask) -> float:
    if not pred.same_geometry(truth):
        pred = BinaryMask(resample_to(_mask_grid(pred), truth).values > 0.5, truth.affine)
    return dice(pred, truth)


def evaluate_task(models: Models, task: TaskInstance, max_steps: int = 8, oracle: bool = False) -> TaskResult:
    """Teacher-forced token accuracy plus one free-running loop.

    With ``oracle`` the loop replays phi* against the oracle masks instead of
    decoding, which checks the harness rather than the model.
    """
    with no_grad():
        terms = teacher_forced_losses(models, task, 0.0)
        if oracle:
            policy = OraclePolicy(task.steps, models.vocab, models.agent.config.phi_dim)
            ex = Executor(oracle_masks=task.masks)
            max_len = UNBOUNDED
        else:
            policy = ModelPolicy(models.agent, models.vocab)
            ex = Executor(models.vision)
            max_len = models.agent.config.max_len
        tr = agent_loop(task.prompt, task.volumes, policy, models.vocab, ex, max_steps=max_steps, max_len=max_len)
    preds = [m.mask for _, m in tr.masks]
    dices = []
    for k, truth in enumerate(task.masks):
        dices.append(_pred_vs_truth(preds[k], truth) if k < len(preds) else 0.0)
    match = tr.complete and tr.answer == task.answer
    return TaskResult(task.kind, dices, terms.token_accuracy, terms.tokens, match, tr.valid, tr.answer, task.answer, tr)


def evaluate(models: Models, tasks: list[TaskInstance], out_dir=None, max_steps: int = 8, oracle: bool = False) -> dict:
    """Per-kind Dice, teacher-forced token accuracy, answer exact match and program validity."""
    results = [evaluate_task(models, t, max_steps, oracle) for t in tasks]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, r in enumerate(results):
            for j, (_, m) in enumerate(r.transcript.masks):
                write_volume(out / f"eval{i:04d}_mask{j}.vxv", m.mask)
    return summarize(results)


def summarize(results: list[TaskResult]) -> dict:
    if not results:
        return {}
    m: dict = {"tasks": len(results)}
    tok = sum(r.token_acc * r.tokens for r in results)
    ntok = sum(r.tokens for r in results)
    m["token_accuracy"] = tok / ntok if ntok else 1.0
    m["answer_match"] = float(np.mean([r.answer_match for r in results]))
    m["validity"] = float(np.mean([r.valid for r in results]))
    all_d = [d for r in results for d in r.dice]
    if all_d:
        m["dice_mean"] = float(np.mean(all_d))
    for kind in sorted({r.kind for r in results}):
        rs = [r for r in results if r.kind == kind]
        m[f"{kind}.tasks"] = len(rs)
        ds = [d for r in rs for d in r.dice]
        if ds:
            m[f"{kind}.dice"] = float(np.mean(ds))
        m[f"{kind}.answer_match"] = float(np.mean([r.answer_match for r in rs]))
        m[f"{kind}.validity"] = float(np.mean([r.valid for r in rs]))
    return m


def format_report(metrics: dict) -> str:
    """One ``key=value`` line per metric, keys sorted."""
    lines = []
    for k in sorted(metrics):
        v = metrics[k]
        lines.append(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}")
    return "\n".join(lines) + ("\n" if lines else "")
