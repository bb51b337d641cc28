"""Two-stage training: invariant-subspace pre-training, then classifier fine-tuning."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ContractError, Tape, Tensor, backward, concat, cross_entropy, index, mul, no_grad
from .config import RunConfig
from .contrastive import (
    AugmentationPolicy,
    NonFiniteLossError,
    anti_divergence_loss,
    augment,
    self_consistency_loss,
    supervised_contrastive_loss,
    total_loss,
)
from .data import Dataset
from .lcib import (
    DegenerateBasisError,
    InvariantBasis,
    adversarial_loss,
    lcib_transform,
    reorthonormalize,
    repair_basis,
)
from .metrics import accuracy, macro_f1, per_class_f1
from .networks import Classifier, Discriminator, Encoder, load_checkpoint, save_checkpoint
from .optim import Adam
from .ppgce import (
    ConfidenceSchedule,
    Prototypes,
    assign_pseudo_labels,
    confidence_ratio,
    partition,
    update_prototypes,
)

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class EpochMetrics:
    epoch: int
    l_sup: float
    l_self: float
    l_anti: float
    l_adv: float
    l_total: float
    confident_fraction: float
    target_macro_f1: float | None
    target_accuracy: float | None
    source_macro_f1: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class StepRecord:
    step: int
    eta: float
    n_target: int
    n_confident: int
    l_sup: float
    l_self: float
    l_anti: float
    l_adv: float
    l_total: float
    basis_error: float | None


@dataclass
class EvalResult:
    macro_f1: float
    accuracy: float
    per_class_f1: list
    predictions: np.ndarray = field(repr=False)


class Model:
    """Encoder, optional invariant basis, discriminator and classifier."""

    def __init__(self, cfg: RunConfig, in_channels: int, n_classes: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_classes = n_classes
        self.use_lcib = cfg.use_lcib
        self.encoder = Encoder(in_channels, cfg.hidden, cfg.d, cfg.kernel_size, cfg.dilations,
                               cfg.enc_dropout, rng=rng)
        # the basis and discriminator are always drawn so every ablation shares one rng stream
        self.basis = InvariantBasis.random(cfg.d, min(cfg.m, cfg.d - 1), rng)
        self.disc = Discriminator(cfg.d, cfg.disc_hidden, rng=rng)
        self.clf = Classifier(cfg.d, n_classes, cfg.clf_hidden, cfg.clf_dropout, rng=rng)

    def transform(self, f: Tensor) -> Tensor:
        return lcib_transform(self.basis, f) if self.use_lcib else f

    def features(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        """Eval-mode reconstructed features (or raw features without the basis)."""
        self.encoder.eval()
        out = []
        with no_grad():
            for i in range(0, len(x), batch):
                out.append(self.transform(self.encoder(Tensor(x[i:i + batch]))).data)
        self.encoder.train()
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.cfg.d))

    def logits(self, x: np.ndarray) -> np.ndarray:
        self.clf.eval()
        with no_grad():
            out = self.clf(Tensor(self.features(x))).data
        self.clf.train()
        return out

    # -- persistence -----------------------------------------------------
    def blobs(self) -> dict[str, np.ndarray]:
        enc = self.encoder
        out = {
            "meta.arch": np.array([enc.in_channels, enc.hidden, enc.out_dim, enc.kernel_size,
                                   self.n_classes, self.clf.params["l1.w"].shape[1],
                                   self.disc.params["l1.w"].shape[1], float(self.use_lcib),
                                   self.basis.m], dtype=np.float64),
            "meta.dilations": np.array(enc.dilations, dtype=np.float64),
        }
        for owner in (self.encoder, self.basis, self.disc, self.clf):
            for name, p in owner.named_parameters():
                out[name] = p.data
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.blobs())

    @classmethod
    def load(cls, path) -> "Model":
        blobs = load_checkpoint(path)
        arch = blobs["meta.arch"].astype(int)
        cin, hidden, d, k, n_c, clf_h, disc_h, use_lcib, m = arch.tolist()
        cfg = RunConfig(d=d, hidden=hidden, kernel_size=k,
                        dilations=tuple(blobs["meta.dilations"].astype(int).tolist()),
                        clf_hidden=clf_h, disc_hidden=disc_h, m=m, use_lcib=bool(use_lcib),
                        use_adv=False)
        model = cls(cfg, cin, n_c, np.random.default_rng(0))
        for owner in (model.encoder, model.basis, model.disc, model.clf):
            for name, _ in list(owner.named_parameters()):
                owner.set(name, blobs[name])
        return model

    def checksum(self, which=("encoder", "basis", "disc", "clf")) -> str:
        h = hashlib.sha256()
        for w in which:
            for name, p in getattr(self, w).named_parameters():
                h.update(name.encode())
                h.update(p.data.tobytes())
        return h.hexdigest()


@dataclass
class TrainResult:
    model: Model
    metrics: list[EpochMetrics]
    steps: list[StepRecord]
    pseudo_labels: list[tuple] = field(default_factory=list, repr=False)


def _schedule(cfg: RunConfig, total_steps: int) -> ConfidenceSchedule:
    return ConfidenceSchedule(eta0=cfg.eta0, eta_max=cfg.eta_max, total_steps=max(total_steps, 1),
                              mode=cfg.schedule, step_size=cfg.eta_step, step_every=cfg.eta_every)


def _check_pair(source: Dataset, target: Dataset) -> None:
    a, b = source.meta, target.meta
    if (a.T, a.D, a.n_c) != (b.T, b.D, b.n_c):
        raise ContractError(f"source (T={a.T}, D={a.D}, n_c={a.n_c}) and target "
                            f"(T={b.T}, D={b.D}, n_c={b.n_c}) disagree")
    if source.y is None:
        raise ContractError("source dataset must be labeled")


def _prototype_scores(model: Model, protos: Prototypes, ds: Dataset, labels) -> tuple:
    if labels is None or not protos.initialized.all():
        return None, None
    pred, _ = assign_pseudo_labels(model.features(ds.x), protos)
    return macro_f1(pred, labels, ds.meta.n_c), accuracy(pred, labels)


def _pretrain_step(model: Model, cfg: RunConfig, protos: Prototypes, xs, ys, xt, xt_aug,
                   eta: float | None, opt_main: Adam, opt_disc: Adam, rng: np.random.Generator):
    n_s, n_t = len(xs), len(xt)
    with Tape():
        f_all = model.encoder(Tensor(np.concatenate([xs, xt, xt_aug], axis=0)), rng=rng)
        fh_all = model.transform(f_all)
        f_s, f_t = index(f_all, slice(0, n_s)), index(f_all, slice(n_s, n_s + n_t))
        fh_s = index(fh_all, slice(0, n_s))
        fh_t = index(fh_all, slice(n_s, n_s + n_t))
        fh_ta = index(fh_all, slice(n_s + n_t, None))

        protos = update_prototypes(protos, fh_s.data, ys)
        psd, sigma = assign_pseudo_labels(fh_t.data, protos)
        # eta None: warm-up, every target sample stays distrusted
        part = partition(None, psd, sigma, 0.0, "quantile") if eta is None else \
            partition(None, psd, sigma, eta, cfg.partition_mode)

        sup_feats = concat([fh_s, index(fh_t, part.confident)], axis=0)
        sup_labels = np.concatenate([ys, part.confident_labels])
        try:
            l_sup = supervised_contrastive_loss(sup_feats, sup_labels, cfg.tau)
        except ContractError as e:
            log.warning("skipping supervised term: %s", e)
            l_sup = Tensor(0.0)

        dis = part.distrusted
        l_self = self_consistency_loss(index(fh_t, dis), index(fh_ta, dis), cfg.tau) if cfg.use_self else Tensor(0.0)
        l_anti = anti_divergence_loss(index(fh_t, dis), fh_s, cfg.tau) if cfg.use_anti else Tensor(0.0)

        alternating = cfg.adversarial_mode == "alternating"
        if cfg.use_adv:
            f_orig = concat([f_s, f_t], axis=0)
            f_rec = concat([fh_s, fh_t], axis=0)
            l_adv = adversarial_loss(model.disc, f_orig, f_rec, reverse=None if alternating else cfg.lambda2)
        else:
            l_adv = Tensor(0.0)

        if alternating:
            terms, objective = total_loss(l_sup, l_self, l_anti, float(l_adv.data), cfg.lambda1, cfg.lambda2)
            if cfg.use_adv and cfg.lambda2:
                objective = objective + mul(l_adv, -cfg.lambda2)
        else:
            terms, objective = total_loss(l_sup, l_self, l_anti, l_adv, cfg.lambda1, cfg.lambda2)

        opt_main.zero_grad()
        opt_disc.zero_grad()
        if objective is not None:
            backward(objective)

    if alternating:
        opt_disc.zero_grad()
        opt_main.step()
        if cfg.use_adv:
            with Tape():
                d_loss = adversarial_loss(model.disc, Tensor(f_orig.data), Tensor(f_rec.data))
                backward(d_loss)
            opt_disc.step()
    else:
        opt_main.step()
        opt_disc.step()
    return protos, part, terms


def train(cfg: RunConfig, source: Dataset, target: Dataset, target_labels=None,
          out_dir=None, dump_pseudo_labels: bool = False) -> TrainResult:
    """Run both stages and return the fitted model with its metrics stream.

    The target dataset's own labels are never read; ``target_labels`` (if
    given) is used only to report target scores in the metrics.
    """
    _check_pair(source, target)
    rng = np.random.default_rng(cfg.seed)
    model = Model(cfg, source.meta.D, source.meta.n_c, rng)
    policy = AugmentationPolicy(cfg.jitter_sigma, (cfg.scale_low, cfg.scale_high))
    betas = (cfg.beta1, cfg.beta2)
    opt_main = Adam([model.encoder, model.basis] if cfg.use_lcib else [model.encoder], cfg.lr, betas)
    opt_disc = Adam([model.disc], cfg.lr, betas)
    protos = Prototypes.empty(source.meta.n_c, cfg.d, cfg.momentum)

    bs = cfg.batch_size
    steps_per_epoch = max(len(source) // bs, 1)
    warm_steps = cfg.warmup_epochs * steps_per_epoch
    sched = _schedule(cfg, (cfg.epochs - cfg.warmup_epochs) * steps_per_epoch)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
    metrics: list[EpochMetrics] = []
    steps: list[StepRecord] = []
    dump: list[tuple] = []
    t_order = np.zeros(0, dtype=np.intp)
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            s_order = rng.permutation(len(source))
            sums = np.zeros(5)
            for b in range(steps_per_epoch):
                si = s_order[b * bs:(b + 1) * bs]
                if len(t_order) < bs:
                    t_order = np.concatenate([t_order, rng.permutation(len(target))])
                ti, t_order = t_order[:bs], t_order[bs:]
                xt = target.x[ti]
                xt_aug = augment(xt, policy, rng)
                eta = None if step < warm_steps else confidence_ratio(sched, step - warm_steps)
                try:
                    protos, part, terms = _pretrain_step(model, cfg, protos, source.x[si], source.y[si],
                                                         xt, xt_aug, eta, opt_main, opt_disc, rng)
                except (NonFiniteLossError, FloatingPointError) as e:
                    raise TrainingAborted(f"step {step}: {e}; last good checkpoint kept") from e

                basis_err = None
                if cfg.use_lcib:
                    try:
                        model.basis = reorthonormalize(model.basis)
                    except DegenerateBasisError as e:
                        log.warning("step %d: %s; reinitializing", step, e)
                        model.basis = repair_basis(model.basis, e.columns, rng)
                    opt_main.owners[1] = model.basis
                    basis_err = model.basis.orthonormality_error()
                    if cfg.debug and not basis_err < 1e-6:
                        raise TrainingAborted(f"step {step}: basis orthonormality error {basis_err:.3e}")

                steps.append(StepRecord(step, 0.0 if eta is None else eta, len(ti), len(part.confident), terms.l_sup, terms.l_self,
                                        terms.l_anti, terms.l_adv, terms.l_total, basis_err))
                if dump_pseudo_labels:
                    conf = np.zeros(len(ti), dtype=bool)
                    conf[part.confident] = True
                    dump.extend((step, int(ti[j]), int(part.labels[j]), float(part.scores[j]), bool(conf[j]))
                                for j in range(len(ti)))
                sums += [terms.l_sup, terms.l_self, terms.l_anti, terms.l_adv, terms.l_total]
                step += 1

            avg = sums / steps_per_epoch
            t_f1, t_acc = _prototype_scores(model, protos, target, target_labels)
            s_f1, _ = _prototype_scores(model, protos, source, source.y)
            rec = EpochMetrics(epoch, *avg.tolist(), steps[-1].n_confident / steps[-1].n_target,
                               t_f1, t_acc, s_f1)
            metrics.append(rec)
            log.info("epoch %d: %s", epoch, rec)
            if out:
                metrics_fh.write(rec.to_json() + "\n")
                metrics_fh.flush()
                model.save(out / "checkpoint.bin")

        finetune_classifier(model, cfg, source, rng)
    finally:
        if out:
            metrics_fh.close()
    if out:
        model.save(out / "checkpoint.bin")
        if dump_pseudo_labels:
            write_pseudo_label_dump(out / "pseudo_labels.csv", dump)
    return TrainResult(model, metrics, steps, dump)


def finetune_classifier(model: Model, cfg: RunConfig, source: Dataset, rng: np.random.Generator) -> None:
    """Cross-entropy on frozen source features; encoder, basis and discriminator untouched."""
    feats = model.features(source.x)
    opt = Adam([model.clf], cfg.finetune_lr, (cfg.beta1, cfg.beta2))
    bs = cfg.batch_size
    model.clf.train()
    for _ in range(cfg.finetune_epochs):
        order = rng.permutation(len(source))
        for b in range(0, len(order), bs):
            idx = order[b:b + bs]
            with Tape():
                loss = cross_entropy(model.clf(Tensor(feats[idx]), rng=rng), source.y[idx])
                opt.zero_grad()
                backward(loss)
            opt.step()


def train_source_only(cfg: RunConfig, source: Dataset, target: Dataset | None = None) -> TrainResult:
    """Baseline without adaptation: encoder and classifier trained jointly on source."""
    if target is not None:
        _check_pair(source, target)
    cfg = cfg.replace(use_lcib=False, use_adv=False)
    rng = np.random.default_rng(cfg.seed)
    model = Model(cfg, source.meta.D, source.meta.n_c, rng)
    opt = Adam([model.encoder, model.clf], cfg.lr, (cfg.beta1, cfg.beta2))
    bs = cfg.batch_size
    steps_per_epoch = max(len(source) // bs, 1)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(source))
        for b in range(steps_per_epoch):
            idx = order[b * bs:(b + 1) * bs]
            with Tape():
                f = model.encoder(Tensor(source.x[idx]), rng=rng)
                loss = cross_entropy(model.clf(f, rng=rng), source.y[idx])
                opt.zero_grad()
                backward(loss)
            opt.step()
    return TrainResult(model, [], [])


def evaluate(model: Model, dataset: Dataset) -> EvalResult:
    if dataset.y is None:
        raise ContractError("evaluate needs a labeled dataset")
    if dataset.meta.D != model.encoder.in_channels or dataset.meta.n_c != model.n_classes:
        raise ContractError(f"checkpoint (D={model.encoder.in_channels}, n_c={model.n_classes}) does not "
                            f"match dataset (D={dataset.meta.D}, n_c={dataset.meta.n_c})")
    pred = np.argmax(model.logits(dataset.x), axis=1)
    n_c = dataset.meta.n_c
    return EvalResult(macro_f1(pred, dataset.y, n_c), accuracy(pred, dataset.y),
                      per_class_f1(pred, dataset.y, n_c).tolist(), pred)


def write_pseudo_label_dump(path, rows) -> None:
    with open(path, "w") as fh:
        fh.write("step,index,pseudo_label,sigma,confident\n")
        for step, i, lab, sig, conf in rows:
            fh.write(f"{step},{i},{lab},{sig!r},{int(conf)}\n")


# ---------------------------------------------------------------------------
# ablation

ABLATION_ROWS = {
    "ID.1": dict(use_lcib=False, use_adv=False, use_self=True, use_anti=True),
    "ID.2": dict(use_lcib=True, use_adv=False, use_self=True, use_anti=True),
    "ID.3": dict(use_lcib=True, use_adv=True, use_self=False, use_anti=False),
    "ID.4": dict(use_lcib=True, use_adv=True, use_self=True, use_anti=False),
    "ID.5": dict(use_lcib=True, use_adv=True, use_self=True, use_anti=True),
}


def run_ablation(cfg: RunConfig, source: Dataset, target: Dataset, rows=None, seeds=None) -> list[dict]:
    """One run per (row, seed); ``target`` must carry labels for scoring only."""
    rows = rows or list(ABLATION_ROWS)
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    unlabeled = target.unlabeled()
    table = []
    for row in rows:
        switches = ABLATION_ROWS[row]
        f1s, accs, zero = [], [], {}
        for seed in seeds:
            res = train(cfg.replace(seed=seed, **switches), source, unlabeled)
            ev = evaluate(res.model, target)
            f1s.append(ev.macro_f1)
            accs.append(ev.accuracy)
            for term in ("l_self", "l_anti", "l_adv"):
                peak = max(abs(getattr(s, term)) for s in res.steps) if res.steps else 0.0
                zero[term] = zero.get(term, True) and peak == 0.0
        table.append({
            "id": row,
            "lcib": switches["use_lcib"], "adv": switches["use_adv"], "sup": True,
            "self": switches["use_self"], "anti": switches["use_anti"],
            "macro_f1": float(np.mean(f1s)), "accuracy": float(np.mean(accs)),
            "macro_f1_per_seed": f1s, "accuracy_per_seed": accs,
            "zero_terms": sorted(t for t, z in zero.items() if z),
        })
    return table
