"""Pairwise ranking training with analytic gradients and AdamW

The minimized objective is ``-sum log sigmoid(s_ui - s_uj) + regularization * ||params||^2`` over sampled triplets
``(u, i, j)`` where ``i`` is a train positive of ``u`` and ``j`` is not. The squared norm covers the ID embeddings
and every mapping matrix. Text embeddings are constants and receive no gradient.
"""

import time
import typing
import logging
import dataclasses

import numpy
import scipy.special

from graph_scribe import _parsers
from graph_scribe import model
from graph_scribe import evaluation
from graph_scribe.dataset import Dataset
from graph_scribe.dataset import Split
from graph_scribe.dataset import GraphTopology
from graph_scribe.dataset import build_graph
from graph_scribe._utilities import GraphScribeError
from graph_scribe._utilities import NonFiniteError
from graph_scribe._utilities import ValidationError


_exclude_from_namespace = set(globals().keys())
_logger = logging.getLogger(__name__)


class TrainingDivergedError(GraphScribeError):
    """A non-finite loss or parameter stopped training

    ``params`` holds the last good parameters and ``history`` the finished epochs.
    """

    def __init__(
        self, message: str, params: model.ModelParams, history: typing.Optional[typing.List[dict]] = None
    ) -> None:
        super().__init__(message)
        self.params = params
        self.history = list(history) if history is not None else []


@dataclasses.dataclass
class TrainConfig:
    """Optimizer and loop settings

    ``weight_decay`` is AdamW's decoupled decay and defaults to zero because ``regularization`` already penalizes
    the squared parameter norm inside the loss.
    """

    learning_rate: float = _parsers.train_defaults["learning_rate"]
    batch_size: int = _parsers.train_defaults["batch_size"]
    regularization: float = _parsers.train_defaults["regularization"]
    epochs: int = _parsers.train_defaults["epochs"]
    patience: int = _parsers.train_defaults["patience"]
    seed: int = 0
    beta1: float = _parsers.train_defaults["beta1"]
    beta2: float = _parsers.train_defaults["beta2"]
    epsilon: float = _parsers.train_defaults["epsilon"]
    weight_decay: float = _parsers.train_defaults["weight_decay"]
    init_scale: float = _parsers.train_defaults["init_scale"]

    def __post_init__(self):
        if self.learning_rate <= 0.0 or self.batch_size < 1 or self.epsilon <= 0.0:
            raise ValidationError("Training 'learning_rate', 'batch_size' and 'epsilon' must be positive")
        if self.regularization < 0.0 or self.weight_decay < 0.0 or self.epochs < 0 or self.patience < 1:
            raise ValidationError(
                "Training 'regularization', 'weight_decay' and 'epochs' must be non-negative and 'patience' positive"
            )
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError("AdamW betas must lie in [0, 1)")


@dataclasses.dataclass
class OptimizerState:
    first_moments: typing.Dict[str, numpy.ndarray]
    second_moments: typing.Dict[str, numpy.ndarray]
    step: int = 0


@dataclasses.dataclass
class TrainResult:
    """Best-validation parameters, the untouched initial parameters, and the epoch history"""

    params: model.ModelParams
    initial_params: model.ModelParams
    history: typing.List[dict]
    best_epoch: int
    graph: GraphTopology


def init_optimizer_state(params: model.ModelParams) -> OptimizerState:
    return OptimizerState(
        first_moments={name: numpy.zeros_like(tensor) for name, tensor in params.tensors().items()},
        second_moments={name: numpy.zeros_like(tensor) for name, tensor in params.tensors().items()},
    )


def sample_triplets(
    train: numpy.ndarray,
    num_items: int,
    batch_size: int,
    rng: numpy.random.Generator,
    train_items: typing.Optional[typing.List[typing.Set[int]]] = None,
) -> numpy.ndarray:
    """Sample ``(u, i, j)`` triplets: a uniform train interaction plus a rejection-sampled negative item

    Users whose train items cover every item are skipped with a warning, so the batch may be smaller than
    ``batch_size``.

    :param train: ``[E, 2]`` train interactions
    :param num_items: item count ``M``
    :param batch_size: number of draws
    :param rng: random generator
    :param train_items: train item set per user, built from ``train`` when omitted

    :returns: ``[B, 3]`` integer triplets

    :raises ValidationError: empty train interactions
    """
    if len(train) == 0:
        raise ValidationError("Triplet sampling requires train interactions")
    if train_items is None:
        train_items = _train_item_sets(train)
    triplets = []
    skipped = set()
    for position in rng.integers(len(train), size=batch_size):
        user, item = (int(value) for value in train[position])
        interacted = train_items.get(user, set())
        if len(interacted) >= num_items:
            skipped.add(user)
            continue
        negative = int(rng.integers(num_items))
        while negative in interacted:
            negative = int(rng.integers(num_items))
        triplets.append((user, item, negative))
    if skipped:
        _logger.warning("Skipped %d user(s) that interacted with every item", len(skipped))
    return numpy.array(triplets, dtype=numpy.int64).reshape(-1, 3)


def _train_item_sets(train: numpy.ndarray) -> typing.Dict[int, typing.Set[int]]:
    sets: typing.Dict[int, typing.Set[int]] = {}
    for user, item in train:
        sets.setdefault(int(user), set()).add(int(item))
    return sets


def _score_differences(batch: numpy.ndarray, final: model.FinalEmbeddings) -> numpy.ndarray:
    users, positives, negatives = batch[:, 0], batch[:, 1], batch[:, 2]
    return numpy.sum(final.users[users] * (final.items[positives] - final.items[negatives]), axis=1)


def bpr_loss_from_scores(
    positive_scores: numpy.ndarray,
    negative_scores: numpy.ndarray,
    regularization: float = 0.0,
    squared_norm: float = 0.0,
) -> float:
    """``-sum log sigmoid(positive - negative) + regularization * squared_norm``, stable for large differences"""
    differences = numpy.asarray(positive_scores, dtype=numpy.float64) - numpy.asarray(
        negative_scores, dtype=numpy.float64
    )
    return float(numpy.sum(numpy.logaddexp(0.0, -differences)) + regularization * squared_norm)


def bpr_loss(
    batch: numpy.ndarray,
    final: model.FinalEmbeddings,
    params: model.ModelParams,
    regularization: float = _parsers.train_defaults["regularization"],
) -> float:
    """Minimized pairwise ranking loss of a triplet batch

    :raises NonFiniteError: a non-finite score difference, naming the first offending triplet
    """
    differences = _score_differences(batch, final)
    finite = numpy.isfinite(differences)
    if not numpy.all(finite):
        position = int(numpy.argmin(finite))
        user, positive, negative = batch[position]
        raise NonFiniteError(f"Non-finite score difference for triplet ({user}, {positive}, {negative})")
    return bpr_loss_from_scores(differences, numpy.zeros_like(differences), regularization, params.squared_norm())


def loss_and_gradients(
    batch: numpy.ndarray,
    params: model.ModelParams,
    graph: GraphTopology,
    text_table=None,
    variant: typing.Optional[str] = None,
    regularization: float = _parsers.train_defaults["regularization"],
) -> typing.Tuple[float, typing.Dict[str, numpy.ndarray]]:
    """Loss and its analytic gradient for every trainable tensor

    The backward pass mirrors :meth:`graph_scribe.model.forward` in reverse: score gradients flow into the layer
    average, through each mapping and the transposed aggregation, down to the ID embeddings.

    :returns: loss and gradients keyed like :meth:`graph_scribe.model.ModelParams.tensors`
    """
    variant = variant if variant is not None else params.variant
    layers, final = model.forward(params, graph, text_table, variant)
    loss = bpr_loss(batch, final, params, regularization) if len(batch) else regularization * params.squared_norm()

    grad_final_users = numpy.zeros_like(final.users)
    grad_final_items = numpy.zeros_like(final.items)
    if len(batch):
        users, positives, negatives = batch[:, 0], batch[:, 1], batch[:, 2]
        weights = -scipy.special.expit(-_score_differences(batch, final))[:, None]
        numpy.add.at(grad_final_users, users, weights * (final.items[positives] - final.items[negatives]))
        numpy.add.at(grad_final_items, positives, weights * final.users[users])
        numpy.add.at(grad_final_items, negatives, -weights * final.users[users])

    gradients = {name: numpy.zeros_like(tensor) for name, tensor in params.tensors().items()}
    if variant == "mf":
        gradients["user_embeddings"] = grad_final_users
        gradients["item_embeddings"] = grad_final_items
    else:
        normalized = graph.normalized_interactions
        num_layers = params.num_layers
        dimension = params.dimension
        carry_users = numpy.zeros_like(final.users)
        carry_items = numpy.zeros_like(final.items)
        for layer in range(num_layers, 0, -1):
            grad_users = grad_final_users / num_layers + carry_users
            grad_items = grad_final_items / num_layers + carry_items
            if variant == "no_align":
                carry_users = normalized @ grad_items
                carry_items = normalized.T @ grad_users
                continue
            previous_users = layers.users[layer - 2] if layer > 1 else layers.initial_users
            previous_items = layers.items[layer - 2] if layer > 1 else layers.initial_items
            text_users, text_items = text_table.layer(layer)
            mapping = params.mappings[layer - 1]
            inputs_users = numpy.hstack([normalized @ previous_items, text_users])
            inputs_items = numpy.hstack([normalized.T @ previous_users, text_items])
            gradients["mappings"][layer - 1] = inputs_users.T @ grad_users + inputs_items.T @ grad_items
            aggregated_users = (grad_users @ mapping.T)[:, :dimension]
            aggregated_items = (grad_items @ mapping.T)[:, :dimension]
            carry_items = normalized.T @ aggregated_users
            carry_users = normalized @ aggregated_items
        if variant == "no_align":
            text_users, text_items = text_table.layer(num_layers)
            mapping = params.mappings[0]
            gradients["mappings"][0] = (
                numpy.hstack([params.user_embeddings, text_users]).T @ carry_users
                + numpy.hstack([params.item_embeddings, text_items]).T @ carry_items
            )
            gradients["user_embeddings"] = (carry_users @ mapping.T)[:, :dimension]
            gradients["item_embeddings"] = (carry_items @ mapping.T)[:, :dimension]
        else:
            gradients["user_embeddings"] = carry_users
            gradients["item_embeddings"] = carry_items

    for name, tensor in params.tensors().items():
        gradients[name] = gradients[name] + 2.0 * regularization * tensor
    return loss, gradients


def backward(
    batch: numpy.ndarray,
    params: model.ModelParams,
    graph: GraphTopology,
    text_table=None,
    variant: typing.Optional[str] = None,
    regularization: float = _parsers.train_defaults["regularization"],
) -> typing.Dict[str, numpy.ndarray]:
    """Analytic gradients of :meth:`bpr_loss` for every trainable tensor. See :meth:`loss_and_gradients`."""
    return loss_and_gradients(batch, params, graph, text_table, variant, regularization)[1]


def adamw_step(
    params: model.ModelParams,
    gradients: typing.Dict[str, numpy.ndarray],
    state: OptimizerState,
    config: TrainConfig,
) -> typing.Tuple[model.ModelParams, OptimizerState]:
    """One bias-corrected AdamW update with decoupled weight decay

    :returns: new parameters and state. The inputs are not modified.
    """
    step = state.step + 1
    first_correction = 1.0 - config.beta1**step
    second_correction = 1.0 - config.beta2**step
    updated = {}
    first_moments = {}
    second_moments = {}
    for name, tensor in params.tensors().items():
        gradient = gradients[name]
        first = config.beta1 * state.first_moments[name] + (1.0 - config.beta1) * gradient
        second = config.beta2 * state.second_moments[name] + (1.0 - config.beta2) * gradient * gradient
        decayed = tensor - config.learning_rate * config.weight_decay * tensor
        updated[name] = decayed - config.learning_rate * (first / first_correction) / (
            numpy.sqrt(second / second_correction) + config.epsilon
        )
        first_moments[name] = first
        second_moments[name] = second
    return params.replace(**updated), OptimizerState(first_moments, second_moments, step)


def final_embeddings(params: model.ModelParams, graph: GraphTopology, text_table=None) -> model.FinalEmbeddings:
    return model.forward(params, graph, text_table)[1]


def validation_metrics(
    params: model.ModelParams,
    graph: GraphTopology,
    text_table,
    dataset: Dataset,
    split: Split,
    seed: int = 0,
) -> typing.Tuple[float, float]:
    """Single-run NDCG@5 and MAP@5 on the validation part"""
    protocol = evaluation.EvalProtocol(num_runs=1, seed=seed)
    scorer = evaluation.EmbeddingScorer(final_embeddings(params, graph, text_table))
    report = evaluation.evaluate(scorer, dataset, split, protocol, part="valid")
    return report.ndcg_at_n, report.map_at_n


def train(
    dataset: Dataset,
    split: Split,
    text_table=None,
    config: typing.Optional[TrainConfig] = None,
    variant: str = "full",
    graph: typing.Optional[GraphTopology] = None,
    dimension: typing.Optional[int] = None,
    initial_params: typing.Optional[model.ModelParams] = None,
) -> TrainResult:
    """Epoch loop of sample, forward, loss, backward, and AdamW step with validation early stopping

    Every epoch draws ``ceil(|train| / batch_size)`` batches. Validation NDCG@5 uses the fixed seed ``config.seed``
    so epochs are compared on the same candidates. Training stops after ``patience`` epochs without improvement and
    returns the best epoch's parameters. With ``epochs = 0`` the initial parameters are returned unchanged.

    :param dataset: dataset
    :param split: split. The propagation graph defaults to the train interactions.
    :param graph_scribe.text_encoder.TextTable text_table: frozen description embeddings. Unused by ``mf``.
    :param config: training settings
    :param variant: model variant
    :param graph: propagation graph
    :param dimension: embedding dimension for ``mf``. Text variants take the text table dimension.
    :param initial_params: starting parameters. Seeded initialization when omitted.

    :returns: best parameters, initial parameters, and per-epoch history
        ``{epoch, loss, val_ndcg5, val_map5, wall_ms}``

    :raises TrainingDivergedError: non-finite loss or parameters, carrying the last good parameters
    """
    config = config if config is not None else TrainConfig()
    graph = graph if graph is not None else build_graph(dataset, split.train)
    if variant == "mf":
        num_layers = 1
        dimension = dimension if dimension is not None else _parsers.encoder_defaults["dimension"]
    else:
        if text_table is None:
            raise ValidationError(f"Variant '{variant}' requires a text embedding table")
        num_layers = text_table.num_layers
        dimension = text_table.dimension
    if initial_params is None:
        initial_params = model.init_params(
            dataset.num_users,
            dataset.num_items,
            dimension,
            num_layers,
            variant=variant,
            seed=config.seed,
            init_scale=config.init_scale,
        )
    history: typing.List[dict] = []
    if config.epochs == 0:
        return TrainResult(initial_params, initial_params, history, best_epoch=0, graph=graph)

    rng = numpy.random.default_rng(config.seed)
    train_items = _train_item_sets(split.train)
    batches = -(-len(split.train) // config.batch_size)
    params = initial_params.copy()
    state = init_optimizer_state(params)
    best_params = initial_params
    best_ndcg = -numpy.inf
    best_epoch = 0
    stale_epochs = 0
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        epoch_loss = 0.0
        for _ in range(batches):
            batch = sample_triplets(split.train, dataset.num_items, config.batch_size, rng, train_items)
            try:
                loss, gradients = loss_and_gradients(
                    batch, params, graph, text_table, variant, config.regularization
                )
            except NonFiniteError as err:
                raise TrainingDivergedError(
                    f"Training diverged in epoch {epoch}: {err}", params=params, history=history
                )
            if not numpy.isfinite(loss):
                raise TrainingDivergedError(
                    f"Training diverged in epoch {epoch}: non-finite loss", params=params, history=history
                )
            candidate, state = adamw_step(params, gradients, state, config)
            if not candidate.is_finite():
                raise TrainingDivergedError(
                    f"Training diverged in epoch {epoch}: non-finite parameters", params=params, history=history
                )
            params = candidate
            epoch_loss += loss
        val_ndcg, val_map = validation_metrics(params, graph, text_table, dataset, split, seed=config.seed)
        history.append(
            {
                "epoch": epoch,
                "loss": epoch_loss / batches,
                "val_ndcg5": val_ndcg,
                "val_map5": val_map,
                "wall_ms": int(round(1000.0 * (time.perf_counter() - start))),
            }
        )
        _logger.info(
            "Epoch %d loss %.6f val NDCG@5 %.6f val MAP@5 %.6f", epoch, epoch_loss / batches, val_ndcg, val_map
        )
        if val_ndcg > best_ndcg:
            best_ndcg = val_ndcg
            best_params = params
            best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.patience:
                _logger.info("Early stopping after epoch %d. Best epoch %d", epoch, best_epoch)
                break
    return TrainResult(best_params, initial_params, history, best_epoch=best_epoch, graph=graph)


def train_mf_baseline(
    dataset: Dataset,
    split: Split,
    config: typing.Optional[TrainConfig] = None,
    dimension: int = _parsers.encoder_defaults["dimension"],
    graph: typing.Optional[GraphTopology] = None,
) -> TrainResult:
    """Matrix factorization baseline: ID embeddings scored by inner product, trained with the same loss"""
    return train(dataset, split, None, config, variant="mf", graph=graph, dimension=dimension)


# Limit help() and 'from module import *' behavior to the module's public API
_module_objects = set(globals().keys()) - _exclude_from_namespace
__all__ = [name for name in _module_objects if not name.startswith("_")]
