"""Continual training regimes over a sequential stream: dynamic-memory
rehearsal, naive fine-tuning, EWC and EWC with frozen normalization, plus
conventional base / full-data training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gram import signatures
from .memory import DynamicMemory
from .validation import ConfigError, StateError


@dataclass
class StepReport:
    """Single logging currency for all strategies."""

    step: int
    loss: float
    batch_accuracy: float
    n_misclassified: int = 0
    n_memory_drawn: int = 0
    n_appended: int = 0
    n_replaced: int = 0


class NaiveStrategy:
    """Sequential updates on the raw input batch; no forgetting counter-measure."""

    name = "naive"

    def __init__(self, model):
        self.model = model
        self.step_count = 0

    def step(self, images, labels, tasks=None, rng=None):
        self.step_count += 1
        loss, acc = self.model.train_step(images, labels)
        return StepReport(self.step_count, loss, acc)


class EWCStrategy:
    """Quadratic penalty anchoring parameters weighted by the Fisher diagonal.

    With frozen_norm=True the normalization layers (running statistics and
    scale/shift) are immutable during continual updates.
    """

    name = "ewc"

    def __init__(self, model, ewc_lambda=100.0, frozen_norm=False):
        if model.fisher is None or model.anchor is None:
            raise StateError("EWC needs a Fisher diagonal and a parameter anchor "
                             "computed after base training")
        self.model = model
        self.ewc_lambda = ewc_lambda
        self.frozen_norm = frozen_norm
        if frozen_norm:
            self.name = "ewc-fbn"
            model.norm_frozen = True
        self.step_count = 0

    def penalty(self):
        """(lambda/2) * sum_i F_i (theta_i - theta*_i)^2 and its gradient."""
        lam = self.ewc_lambda
        loss = 0.0
        grads = {}
        for name, p in self.model.named_params().items():
            diff = p - self.model.anchor[name]
            f = self.model.fisher[name]
            loss += 0.5 * lam * float(np.sum(f * diff * diff))
            grads[name] = lam * f * diff
        return loss, grads

    def step(self, images, labels, tasks=None, rng=None):
        self.step_count += 1
        pen_loss, pen_grads = self.penalty() if self.ewc_lambda else (0.0, None)
        loss, acc = self.model.train_step(images, labels,
                                          penalty_grads=pen_grads, penalty_loss=pen_loss)
        return StepReport(self.step_count, loss, acc)


class DMStrategy:
    """Gram-distance dynamic-memory rehearsal.

    Per input batch: one eval-mode forward pass yields predictions and gram
    signatures; every sample is inserted into the memory (update rules 1-3);
    the training batch is assembled from the misclassified samples plus
    uniform memory draws up to size T; one train-mode update follows. The
    memory update strictly precedes the model update.
    """

    name = "dm"

    def __init__(self, model, memory_size=32, train_batch_size=8,
                 recompute_signatures=False):
        self.model = model
        self.memory = DynamicMemory(memory_size)
        self.train_batch_size = train_batch_size
        self.recompute_signatures = recompute_signatures
        self.step_count = 0
        self.last_train_images = None
        self.last_train_labels = None

    def step(self, images, labels, tasks=None, rng=None):
        self.step_count += 1
        rng = rng or np.random.default_rng()
        labels = np.asarray(labels).astype(np.int64).reshape(-1)
        if len(labels) > self.train_batch_size:
            raise ConfigError(
                f"input batch of {len(labels)} exceeds training batch size "
                f"{self.train_batch_size}"
            )
        if tasks is None:
            tasks = ["?"] * len(labels)
        # shared eval-mode pass: predictions and signatures under the current model
        logits, taps = self.model.forward_with_taps(images, train=False)
        preds = (logits > 0).astype(np.int64)
        sigs = self._signatures_from_taps(taps)
        if self.recompute_signatures:
            self.memory.refresh_signatures(lambda X: signatures(self.model, X),
                                           labels=set(labels.tolist()))
        n_appended = n_replaced = 0
        for img, lab, sig, task in zip(images, labels, sigs, tasks):
            outcome = self.memory.insert(img, lab, sig, self.step_count, task)
            if outcome.kind == "appended":
                n_appended += 1
            else:
                n_replaced += 1
        mis = preds != labels
        n_mis = int(mis.sum())
        drawn = self.memory.draw_rehearsal(self.train_batch_size - n_mis, rng)
        train_images = [images[i] for i in np.nonzero(mis)[0]] + [it.image for it in drawn]
        train_labels = [int(l) for l in labels[mis]] + [it.label for it in drawn]
        self.last_train_images = np.stack(train_images)
        self.last_train_labels = np.asarray(train_labels)
        loss, acc = self.model.train_step(self.last_train_images, self.last_train_labels)
        batch_acc = float(np.mean(preds == labels))
        return StepReport(self.step_count, loss, batch_acc, n_misclassified=n_mis,
                          n_memory_drawn=len(drawn), n_appended=n_appended,
                          n_replaced=n_replaced)

    def _signatures_from_taps(self, taps):
        from .gram import GramSignature, gram_matrix

        n = taps[0].shape[0]
        return [GramSignature([gram_matrix(t[i]) for t in taps], self.model.version)
                for i in range(n)]


def make_strategy(name, model, ewc_lambda=100.0, memory_size=32, train_batch_size=8,
                  recompute_signatures=False):
    if name == "naive":
        return NaiveStrategy(model)
    if name == "ewc":
        return EWCStrategy(model, ewc_lambda=ewc_lambda)
    if name == "ewc-fbn":
        return EWCStrategy(model, ewc_lambda=ewc_lambda, frozen_norm=True)
    if name == "dm":
        return DMStrategy(model, memory_size=memory_size,
                          train_batch_size=train_batch_size,
                          recompute_signatures=recompute_signatures)
    raise ConfigError(f"unknown strategy {name!r}")


def train_base(model, images, labels, epochs, batch_size=8, rng=None):
    """Conventional multi-epoch training on the base split."""
    return model.fit(images, labels, epochs=epochs, batch_size=batch_size, rng=rng)


def train_full(model, images, labels, epochs, batch_size=8, rng=None):
    """Upper-bound training on the union of all training data at once."""
    return model.fit(images, labels, epochs=epochs, batch_size=batch_size, rng=rng)
