"""2D encoder-decoder lesion segmenter with plain or nested-dense skips.

Nodes are named X^{i,j}: level i (resolution 224 / 2^i), column j. Encoder
nodes X^{i,0} are fed by a 2x2 max-pool of the node above. A decoder node
X^{i,j} concatenates same-level sources with the 2x nearest-upsampled
X^{i+1,j-1}: every X^{i,0..j-1} in the nested-dense layout, only X^{i,0} in
the plain layout, where decoder nodes exist only on the diagonal
i + j = L - 1. The prediction head is a 1x1 convolution on X^{0,L-1}.
"""

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from config import derive_seed
from errors import DataError, NumericalError, ValidationError
from metrics import dataset_score, scan_score
from models import Topology, TrainConfig
from slicer import SliceSample
from tqdm import tqdm

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7

NodeId = Tuple[int, int]


def node_name(node: NodeId) -> str:
    return f"x_{node[0]}_{node[1]}"


def topology_nodes(topology: Topology) -> List[NodeId]:
    """Nodes in evaluation order (column by column, top to bottom)"""
    depth = topology.depth
    nodes = []
    for j in range(depth):
        for i in range(depth - j):
            if j == 0 or topology.kind == "nested_dense" or i + j == depth - 1:
                nodes.append((i, j))
    return nodes


class ConvBlock(nn.Module):
    """Conv3x3 -> ReLU -> Conv3x3 -> ReLU"""

    def __init__(self, in_channels: int, out_channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class SegNet(nn.Module):
    """The trainable parameters of one topology"""

    def __init__(self, topology: Topology, in_channels: int = 1) -> None:
        super().__init__()
        self.topology = topology
        self.node_ids = topology_nodes(topology)
        self.blocks = nn.ModuleDict()
        for node in self.node_ids:
            self.blocks[node_name(node)] = ConvBlock(
                self._node_inputs(node, in_channels), topology.channels(node[0])
            )
        self.head = nn.Conv2d(topology.channels(0), 1, kernel_size=1)

    def _node_inputs(self, node: NodeId, in_channels: int) -> int:
        i, j = node
        t = self.topology
        if j == 0:
            return in_channels if i == 0 else t.channels(i - 1)
        same_level = j if t.kind == "nested_dense" else 1
        return same_level * t.channels(i) + t.channels(i + 1)

    def _sources(self, node: NodeId) -> List[NodeId]:
        i, j = node
        if self.topology.kind == "nested_dense":
            return [(i, k) for k in range(j)]
        return [(i, 0)]

    def reset_parameters(self, seed: int) -> None:
        """Seeded Glorot-uniform weights, zero biases"""
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, nn.Conv2d):
                    area = module.kernel_size[0] * module.kernel_size[1]
                    fan_in = module.in_channels * area
                    fan_out = module.out_channels * area
                    bound = math.sqrt(6.0 / (fan_in + fan_out))
                    module.weight.uniform_(-bound, bound, generator=generator)
                    module.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outputs: Dict[NodeId, torch.Tensor] = {}
        for node in self.node_ids:
            i, j = node
            if j == 0:
                source = x if i == 0 else F.max_pool2d(outputs[(i - 1, 0)], 2)
            else:
                below = F.interpolate(
                    outputs[(i + 1, j - 1)], scale_factor=2, mode="nearest"
                )
                skips = [outputs[s] for s in self._sources(node)]
                source = torch.cat(skips + [below], dim=1)
            out = self.blocks[node_name(node)](source)
            if not torch.isfinite(out).all():
                raise NumericalError(f"Non-finite activation at node X^{{{i},{j}}}")
            outputs[node] = out
        logits = self.head(outputs[(0, self.topology.depth - 1)])
        return torch.sigmoid(logits)[:, 0]


# A SegNet instance is the parameter set of its topology
ModelParams = SegNet


def build_model(
    topology: Topology, seed: int = 0, dtype: torch.dtype = torch.float32
) -> SegNet:
    model = SegNet(topology)
    model.reset_parameters(seed)
    return model.to(dtype)


def count_parameters(model: SegNet) -> int:
    return sum(p.numel() for p in model.parameters())


def _as_batch(model: SegNet, batch: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    dtype = next(model.parameters()).dtype
    tensor = torch.as_tensor(np.asarray(batch) if not torch.is_tensor(batch) else batch)
    tensor = tensor.to(dtype)
    if tensor.ndim == 3:
        tensor = tensor[:, None]
    if tensor.ndim != 4 or tensor.shape[1] != 1:
        raise ValidationError(
            f"Expected a B x H x W batch, got shape {tuple(tensor.shape)}"
        )
    divisor = model.topology.min_side_divisor
    if tensor.shape[2] % divisor or tensor.shape[3] % divisor:
        raise ValidationError(
            f"Input side {tuple(tensor.shape[2:])} not divisible by {divisor} "
            f"for depth {model.topology.depth}"
        )
    return tensor


def forward(model: SegNet, batch: Union[np.ndarray, torch.Tensor]) -> torch.Tensor:
    """B x H x W probabilities in (0, 1)"""
    return model(_as_batch(model, batch))


def weighted_bce(
    probs: torch.Tensor, masks: Union[np.ndarray, torch.Tensor], w: float
) -> torch.Tensor:
    """Mean of -[w y ln p + (1 - w)(1 - y) ln(1 - p)] with p clamped"""
    target = torch.as_tensor(masks).to(probs.dtype)
    if target.shape != probs.shape:
        raise ValidationError(
            f"Probabilities {tuple(probs.shape)} and masks {tuple(target.shape)} differ"
        )
    p = probs.clamp(BCE_EPS, 1.0 - BCE_EPS)
    loss = w * target * torch.log(p) + (1.0 - w) * (1.0 - target) * torch.log1p(-p)
    return -loss.mean()


def gradients(
    model: SegNet,
    batch: Union[np.ndarray, torch.Tensor],
    masks: Union[np.ndarray, torch.Tensor],
    w: float,
) -> Dict[str, torch.Tensor]:
    """Reverse-mode derivatives of the weighted BCE for every parameter"""
    names, params = zip(*model.named_parameters())
    loss = weighted_bce(forward(model, batch), masks, w)
    grads = torch.autograd.grad(loss, params)
    return dict(zip(names, grads))


def check_gradients(
    model: SegNet,
    batch: Union[np.ndarray, torch.Tensor],
    masks: Union[np.ndarray, torch.Tensor],
    w: float,
    h: float = 1e-4,
    abs_floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central finite differences.

    Relative error is |a - n| / max(|a|, |n|, abs_floor).
    """
    analytic = gradients(model, batch, masks, w)
    worst = 0.0
    with torch.no_grad():
        for name, param in model.named_parameters():
            flat = param.view(-1)
            grad = analytic[name].reshape(-1)
            for k in range(flat.numel()):
                original = flat[k].item()
                flat[k] = original + h
                upper = weighted_bce(forward(model, batch), masks, w).item()
                flat[k] = original - h
                lower = weighted_bce(forward(model, batch), masks, w).item()
                flat[k] = original
                numeric = (upper - lower) / (2.0 * h)
                exact = grad[k].item()
                scale = max(abs(exact), abs(numeric), abs_floor)
                worst = max(worst, abs(exact - numeric) / scale)
    return worst


@dataclass
class AdamState:
    """First/second moments and step count, held by a torch Adam optimizer"""

    optimizer: torch.optim.Adam

    @classmethod
    def create(cls, model: SegNet, cfg: TrainConfig) -> "AdamState":
        optimizer = torch.optim.Adam(
            model.parameters(),
            lr=cfg.lr,
            betas=cfg.betas,
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,  # L2-coupled: added to the gradient
            foreach=False,
        )
        return cls(optimizer=optimizer)

    @property
    def t(self) -> int:
        for state in self.optimizer.state.values():
            return int(state["step"])
        return 0


def adam_step(
    model: SegNet, grads: Dict[str, torch.Tensor], state: AdamState
) -> Tuple[SegNet, AdamState]:
    """Apply one Adam update with the given gradients"""
    for name, param in model.named_parameters():
        if name not in grads:
            raise ValidationError(f"Missing gradient for {name}")
        grad = grads[name]
        if grad.shape != param.shape:
            raise ValidationError(f"Gradient for {name} has shape {tuple(grad.shape)}")
        param.grad = grad.detach().clone().to(param.dtype)
    state.optimizer.step()
    return model, state


def split_grouped(
    samples: Sequence[SliceSample], ratio: float, seed: int
) -> Tuple[List[SliceSample], List[SliceSample]]:
    """Split by patient (or scan) so no group straddles train and validation"""
    groups = sorted({s.group_key for s in samples})
    if len(groups) < 2:
        raise ValidationError(f"Need at least 2 patient/scan groups, got {len(groups)}")

    order = np.random.default_rng(seed).permutation(len(groups))
    # ratio * n can overshoot an exact integer by one ulp
    n_train = math.ceil(round(ratio * len(groups), 9))
    n_train = min(max(n_train, 1), len(groups) - 1)
    train_groups = {groups[k] for k in order[:n_train]}

    train = [s for s in samples if s.group_key in train_groups]
    val = [s for s in samples if s.group_key not in train_groups]
    return train, val


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_dice: float


@dataclass
class TrainingResult:
    model: SegNet
    log: List[EpochLog] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def best_val_dice(self) -> float:
        return self.log[self.best_epoch - 1].val_dice if self.log else 0.0


def _stack(samples: Sequence[SliceSample]) -> Tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return images, masks


def predict(
    model: SegNet,
    samples: Sequence[SliceSample],
    threshold: float = 0.5,
    batch_size: int = 8,
) -> List[np.ndarray]:
    """Binary masks where probability >= threshold"""
    model.eval()
    masks: List[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            images, _ = _stack(samples[start : start + batch_size])
            probs = forward(model, images)
            masks.extend((probs >= threshold).to(torch.uint8).cpu().numpy())
    return masks


def validation_dice(
    model: SegNet, samples: Sequence[SliceSample], threshold: float, batch_size: int
) -> float:
    """Mean per-scan Dice, empty-truth scans excluded when others exist"""
    predictions = predict(model, samples, threshold, batch_size)
    by_scan: Dict[str, Tuple[List[np.ndarray], List[np.ndarray]]] = {}
    for sample, pred in zip(samples, predictions):
        preds, truths = by_scan.setdefault(sample.scan_id, ([], []))
        preds.append(pred)
        truths.append(sample.mask)
    scores = [scan_score(p, t, scan_id) for scan_id, (p, t) in by_scan.items()]
    if all(score.empty_truth for score in scores):
        return float(np.mean([score.dice for score in scores]))
    return dataset_score(scores)[0]


def train(
    samples: Sequence[SliceSample],
    cfg: TrainConfig,
    val_samples: Optional[Sequence[SliceSample]] = None,
    dtype: torch.dtype = torch.float32,
    progress: bool = False,
) -> TrainingResult:
    """Mini-batch Adam on weighted BCE; keep the best-validation-Dice epoch.

    Without ``val_samples`` the slices are split by patient using
    ``cfg.split_ratio``. Ties in validation Dice keep the earlier epoch.
    """
    if val_samples is None:
        train_set, val_set = split_grouped(
            samples, cfg.split_ratio, derive_seed(cfg.seed, "split")
        )
    else:
        train_set, val_set = list(samples), list(val_samples)
    if not train_set or not val_set:
        raise ValidationError("Training needs non-empty training and validation sets")

    model = build_model(cfg.topology, derive_seed(cfg.seed, "init"), dtype)
    state = AdamState.create(model, cfg)
    shuffle = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    images, masks = _stack(train_set)

    result = TrainingResult(model=model)
    best_state: Optional[Dict[str, torch.Tensor]] = None
    best_score = -1.0

    epochs = tqdm(range(1, cfg.epochs + 1), desc="epochs", disable=not progress)
    for epoch in epochs:
        model.train()
        order = shuffle.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            index = order[start : start + cfg.batch_size]
            state.optimizer.zero_grad()
            probs = forward(model, images[index])
            loss = weighted_bce(probs, masks[index], cfg.bce_pos_weight)
            loss.backward()
            state.optimizer.step()
            total += loss.item() * len(index)

        train_loss = total / len(order)
        val_score = validation_dice(
            model, val_set, cfg.prediction_threshold, cfg.batch_size
        )
        result.log.append(
            EpochLog(epoch=epoch, train_loss=train_loss, val_dice=val_score)
        )
        logger.debug("epoch %d loss %.5f val dice %.4f", epoch, train_loss, val_score)
        if not math.isfinite(train_loss):
            raise NumericalError(f"Training loss became non-finite at epoch {epoch}")

        if val_score > best_score:
            best_score = val_score
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    logger.info(
        "Trained %d epochs; best validation Dice %.4f at epoch %d",
        cfg.epochs,
        best_score,
        result.best_epoch,
    )
    return result


def save_checkpoint(
    model: SegNet,
    path: Union[str, Path],
    cfg: Optional[TrainConfig] = None,
    epoch: int = 0,
    val_dice: float = 0.0,
) -> None:
    """Write ``<path>.json`` metadata and ``<path>.bin`` float32 parameters.

    The payload concatenates the state-dict tensors in order: nodes in
    evaluation order (conv1.weight, conv1.bias, conv2.weight, conv2.bias),
    then head.weight, head.bias; each tensor row-major, little-endian.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = model.state_dict()
    meta = {
        "topology": model.topology.model_dump(),
        "config": cfg.model_dump() if cfg else None,
        "epoch": epoch,
        "val_dice": val_dice,
        "tensors": [[name, list(t.shape)] for name, t in tensors.items()],
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    payload = np.concatenate(
        [t.detach().cpu().numpy().astype("<f4").ravel() for t in tensors.values()]
    )
    payload.tofile(path.with_suffix(".bin"))


def load_checkpoint(path: Union[str, Path]) -> Tuple[SegNet, Dict]:
    path = Path(path)
    try:
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        payload = np.fromfile(path.with_suffix(".bin"), dtype="<f4")
    except FileNotFoundError as e:
        raise DataError(f"Checkpoint not found: {path}") from e

    model = SegNet(Topology(**meta["topology"]))
    expected = count_parameters(model)
    if payload.size != expected:
        raise DataError(
            f"Checkpoint {path} has {payload.size} values, expected {expected}"
        )

    state = {}
    offset = 0
    for name, shape in meta["tensors"]:
        size = int(np.prod(shape))
        chunk = payload[offset : offset + size].reshape(shape)
        state[name] = torch.from_numpy(chunk.copy())
        offset += size
    model.load_state_dict(state)
    model.eval()
    return model, meta
