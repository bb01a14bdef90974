"""Supervised training loop shared by the classifier and the feature extractor."""

import contextlib
import logging

import numpy as np
import torch
import torch.nn.functional as F

from latentaug.exception import DivergenceError
from latentaug.utils.imaging import images_to_tensor, read_image
from latentaug.utils.seeding import derive_seed, numpy_rng

logger = logging.getLogger(__name__)


@contextlib.contextmanager
def seeded(root_seed, name, *keys):
    """Run a block with torch's global generator seeded from a named stream, then restore it."""

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(root_seed, name, *keys))
        yield


def load_images(manifest, size, records=None):
    """``(N, size, size, 3)`` float32 array of the manifest images in record order."""

    records = manifest.records if records is None else records
    if not records:
        return np.zeros((0, size, size, 3), dtype=np.float32)
    return np.stack([read_image(manifest.resolve(r), size) for r in records])


def encode_targets(values, classes):

    index = {c: i for i, c in enumerate(classes)}
    return np.array([index[v] for v in values], dtype=np.int64)


def inverse_frequency_weights(targets, n_classes):
    """``N / (C * n_c)`` per class; classes absent from ``targets`` get weight 0."""

    counts = np.bincount(np.asarray(targets, dtype=np.int64), minlength=n_classes).astype(np.float64)
    weights = np.zeros(n_classes)
    present = counts > 0
    weights[present] = counts.sum() / (present.sum() * counts[present])
    return weights


def minibatches(n, batch_size, rng):

    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


@torch.no_grad()
def predict_proba(network, images, batch_size=64, device="cpu"):

    network.eval()
    out = []
    for start in range(0, len(images), batch_size):
        x = images_to_tensor(images[start : start + batch_size], device)
        out.append(F.softmax(network(x), dim=1).cpu().numpy())
    return np.concatenate(out) if out else np.zeros((0, 0))


def fit_classifier(
    network,
    train_x,
    train_y,
    val_x,
    val_y,
    score_fn,
    class_weights=None,
    learning_rate=1e-3,
    weight_decay=0.0,
    epochs=10,
    batch_size=32,
    patience=None,
    seed=0,
    flip=True,
    device="cpu",
    log_prefix="Train",
):
    """Train with (weighted) cross entropy and keep the best-validation epoch.

    Returns ``(best_state_dict, best_score, history)``. ``score_fn(y_true, y_pred)``
    ranks epochs (higher is better) and a non-finite score never beats a finite one;
    the first epoch is kept if no later epoch improves on it. Without a validation set
    there is no selection: all epochs run and the last one is kept. Otherwise training
    stops after ``patience`` epochs without improvement.

    Raises
    ------
    DivergenceError
        the loss became non-finite
    """

    network.to(device)
    weight = None if class_weights is None else torch.as_tensor(class_weights, dtype=torch.float32, device=device)
    optimizer = torch.optim.Adam(network.parameters(), lr=learning_rate, weight_decay=weight_decay)

    train_t = torch.as_tensor(np.asarray(train_y), dtype=torch.long)
    best_state, best_score, best_rank, best_epoch = None, -np.inf, -np.inf, -1
    history = []

    selecting = len(val_x) > 0
    if not selecting:
        logger.info(f"{log_prefix}: no validation set, keeping the last of {epochs} epochs")

    for epoch in range(epochs):

        network.train()
        rng = numpy_rng(seed, "batches", epoch)
        losses = []

        with seeded(seed, "dropout", epoch):
            for idx in minibatches(len(train_x), batch_size, rng):

                x = images_to_tensor(train_x[idx], device)
                if flip:
                    flips = torch.as_tensor(rng.random(len(idx)) < 0.5, device=device)
                    x = torch.where(flips[:, None, None, None], x.flip(3), x)

                # batch norm needs two samples
                if x.shape[0] < 2:
                    continue

                loss = F.cross_entropy(network(x), train_t[idx].to(device), weight=weight)
                if not torch.isfinite(loss):
                    logger.error(f"{log_prefix}: non-finite loss at epoch {epoch}")
                    raise DivergenceError("classifier loss is not finite", {"epoch": epoch, "loss": float(loss)})

                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                losses.append(float(loss))

        mean_loss = float(np.mean(losses)) if losses else float("nan")

        if selecting:
            pred = predict_proba(network, val_x, device=device).argmax(axis=1)
            score = float(score_fn(np.asarray(val_y), pred))
            if not np.isfinite(score):
                logger.warning(f"{log_prefix}: non-finite validation score at epoch {epoch}")
            rank = score if np.isfinite(score) else -np.inf
        else:
            score, rank = float("nan"), float(epoch)

        history.append({"epoch": epoch, "loss": mean_loss, "score": score})
        logger.debug(f"{log_prefix}: epoch {epoch} loss {mean_loss:.4f} val score {score:.4f}")

        if best_state is None or rank > best_rank:
            best_score, best_rank, best_epoch = score, rank, epoch
            best_state = {k: v.detach().clone() for k, v in network.state_dict().items()}
        elif selecting and patience is not None and epoch - best_epoch >= patience:
            logger.info(f"{log_prefix}: early stop at epoch {epoch} (best epoch {best_epoch})")
            break

    network.load_state_dict(best_state)
    network.eval()

    return best_state, best_score, history
