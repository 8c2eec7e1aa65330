"""Config-driven stages: train, profile, fit-energy, compress, finetune, evaluate, verify.

Every stage reads its inputs from and writes its outputs to the run
directory. Artifact files carry the config hash and the seeds in their
metadata and contain no timestamps; wall-clock information only goes to
the sidecar log ``ecc.log``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .data import (BatchStream, TOY_INPUT_SHAPE, accuracy, load_columnar, load_raster,
                   make_toy_dataset, toy_architecture)
from .energy import (ExternalCommandDevice, OracleError, SimulatedDevice, append_profile_rows,
                     bilinear_energy, bilinear_grad, collect, fit_energy_model, load_energy_model,
                     load_profile, relative_test_error, sample_sparsities, samples_to_arrays,
                     save_energy_model, write_profile_head)
from .network import (Network, architecture_from_dicts, check_architecture,
                      loss_and_grad, load_checkpoint, mask_from_network, save_checkpoint)
from .oracles import (MAX_BRUTE_FORCE_CHANNELS, ProxInstance, brute_force_prox,
                      finite_diff_grad, prox_objective, random_prox_instance)
from .solver import (AdamState, SolverConfig, adam_step, compress, finetune, full_widths,
                     prox_thresholds, write_trace)
from .tensor import channel_norms_sq

log = logging.getLogger("ecc")

ARTIFACTS = {
    "dense": "dense.ckpt",
    "profile": "profile.tsv",
    "model": "energy_model.json",
    "fit_curve": "energy_fit.tsv",
    "compressed": "compressed.ckpt",
    "trace": "trace.tsv",
    "finetuned": "finetuned.ckpt",
    "report": "report.json",
    "log": "ecc.log",
}

# keys that only decide where files go; they never change file contents
_UNHASHED = ("output_dir",)


class ConfigError(ValueError):
    pass


def default_config():
    text = resources.files("ecc").joinpath("resources/toy.yaml").read_text()
    return yaml.safe_load(text)


def _merge(base, override, where=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def set_key(data, dotted, value):
    """Set ``a.b.c`` in a nested dict; the key must already exist."""
    parts = dotted.split(".")
    node = data
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


@dataclass
class PipelineConfig:
    """Whole-run configuration: one section per stage.

    ``base_dir`` anchors relative dataset paths (the config file's folder).
    """

    data: dict
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path=None, overrides=None):
        data = default_config()
        base = Path(".")
        if path is not None:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
            if not isinstance(user, dict):
                raise ConfigError(f"{path}: expected a mapping at the top level")
            data = _merge(data, user)
            base = Path(path).resolve().parent
        for key, value in (overrides or {}).items():
            set_key(data, key, value)
        cfg = cls(data, base)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.data[key]

    # -- derived views ---------------------------------------------------

    @property
    def seed(self):
        return int(self.data["seed"])

    @property
    def output_dir(self):
        return Path(self.data["output_dir"])

    def path(self, artifact):
        return self.output_dir / ARTIFACTS[artifact]

    def prepare_output(self):
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def config_hash(self):
        hashed = {k: v for k, v in self.data.items() if k not in _UNHASHED}
        blob = json.dumps(hashed, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def seeds(self):
        return {
            "seed": self.seed,
            "dataset": int(self.data["dataset"]["seed"]),
            "oracle": int(self.data["oracle"]["simulated"]["seed"]),
            "profile": int(self.data["profile"]["seed"]),
            "split": int(self.data["energy_fit"]["split_seed"]),
        }

    def metadata(self, stage, **extra):
        meta = {"config_hash": self.config_hash(), "seeds": self.seeds(), "stage": stage}
        meta.update(extra)
        return meta

    def architecture(self):
        """``(layers, input_shape)``."""
        arch = self.data["architecture"]
        if arch == "toy":
            layers = toy_architecture(int(self.data["n_classes"]))
            shape = self.data["input_shape"] or TOY_INPUT_SHAPE
        elif isinstance(arch, list):
            layers = architecture_from_dicts(arch)
            shape = self.data["input_shape"]
            if shape is None:
                raise ConfigError("input_shape is required with an explicit architecture")
        else:
            raise ConfigError("architecture must be 'toy' or a list of layer mappings")
        shape = tuple(int(v) for v in shape)
        check_architecture(layers, shape)
        return layers, shape

    def solver_config(self, budget):
        opts = dict(self.data["solver"])
        opts.pop("budget_fraction")
        opts["budget"] = float(budget)
        return SolverConfig(**opts)

    def validate(self):
        self.architecture()
        ds = self.data["dataset"]
        if ds["kind"] not in ("toy", "columnar", "raster"):
            raise ConfigError(f"unknown dataset kind {ds['kind']!r}")
        if ds["kind"] != "toy":
            for key in ("train_path", "val_path"):
                if not ds[key]:
                    raise ConfigError(f"dataset.{key} is required for {ds['kind']} data")
                if not self.resolve(ds[key]).is_file():
                    raise ConfigError(f"dataset.{key}: no such file {ds[key]}")
        oracle = self.data["oracle"]
        if oracle["kind"] not in ("simulated", "external"):
            raise ConfigError(f"unknown oracle kind {oracle['kind']!r}")
        if oracle["kind"] == "external" and not oracle["command"]:
            raise ConfigError("oracle.command is required for the external oracle")
        if self.data["solver"]["budget"] is None and self.data["solver"]["budget_fraction"] is None:
            raise ConfigError("set solver.budget or solver.budget_fraction")
        if int(self.data["profile"]["n_samples"]) < 2:
            raise ConfigError("profile.n_samples must be at least 2")
        # constructing the solver config runs its own checks
        self.solver_config(self.data["solver"]["budget"] or 1.0)

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p


# -- logging ---------------------------------------------------------------


def attach_run_log(cfg):
    """Send log records to ``<output_dir>/ecc.log`` as well; returns the handler."""
    cfg.prepare_output()
    handler = logging.FileHandler(cfg.path("log"))
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    if log.level == logging.NOTSET or log.level > logging.INFO:
        log.setLevel(logging.INFO)
    return handler


# -- shared helpers --------------------------------------------------------


def load_dataset(cfg):
    """``(X_train, y_train, X_val, y_val)`` for the configured dataset."""
    ds = cfg["dataset"]
    _, shape = cfg.architecture()
    if ds["kind"] == "toy":
        n_classes = int(cfg["n_classes"])
        Xtr, ytr = make_toy_dataset(int(ds["n_train"]), seed=int(ds["seed"]),
                                    n_classes=n_classes, size=shape[1], noise=float(ds["noise"]))
        Xva, yva = make_toy_dataset(int(ds["n_val"]), seed=int(ds["seed"]) + 1,
                                    n_classes=n_classes, size=shape[1], noise=float(ds["noise"]))
        return Xtr, ytr, Xva, yva
    if ds["kind"] == "columnar":
        Xtr, ytr = load_columnar(cfg.resolve(ds["train_path"]), shape)
        Xva, yva = load_columnar(cfg.resolve(ds["val_path"]), shape)
    else:
        Xtr, ytr = load_raster(cfg.resolve(ds["train_path"]))[:2]
        Xva, yva = load_raster(cfg.resolve(ds["val_path"]))[:2]
    for X in (Xtr, Xva):
        if tuple(X.shape[1:]) != shape:
            raise ConfigError(f"dataset samples have shape {X.shape[1:]}, expected {shape}")
    return Xtr, ytr, Xva, yva


def build_oracle(cfg):
    layers, shape = cfg.architecture()
    oc = cfg["oracle"]
    if oc["kind"] == "external":
        return ExternalCommandDevice(oc["command"], layers, shape, timeout=float(oc["timeout"]))
    return simulated_device(oc["simulated"], layers, shape)


def simulated_device(sim, layers, shape):
    return SimulatedDevice.from_architecture(
        layers, shape, joules_per_mac=float(sim["joules_per_mac"]),
        joules_per_weight=float(sim["joules_per_weight"]),
        static_joules=float(sim["static_joules"]), mode=sim["mode"],
        noise=float(sim["noise"]), seed=int(sim["seed"]))


def _stream(cfg, X, y, offset):
    return BatchStream(X, y, int(cfg["dataset"]["batch_size"]), seed=cfg.seed + offset)


def _check_arch(cfg, net, what):
    layers, shape = cfg.architecture()
    if list(net.layers) != list(layers) or tuple(net.input_shape) != shape:
        raise ConfigError(f"{what} does not match the configured architecture")


def _load_model(cfg, layers):
    model, meta = load_energy_model(cfg.path("model"))
    if model.n_layers != len(layers):
        raise ConfigError(
            f"energy model covers {model.n_layers} layers, architecture has {len(layers)}")
    return model, meta


# -- stages ----------------------------------------------------------------


def cmd_train(cfg):
    """Train the dense network with plain Adam; writes ``dense.ckpt``."""
    cfg.prepare_output()
    layers, shape = cfg.architecture()
    Xtr, ytr, Xva, yva = load_dataset(cfg)
    net = Network.init(layers, shape, seed=cfg.seed)
    adam = AdamState(net)
    stream = _stream(cfg, Xtr, ytr, 0)
    lr = float(cfg["train"]["lr"])
    n_iter = int(cfg["train"]["iterations"])
    for it in range(1, n_iter + 1):
        X, labels = next(stream)
        loss, grads = loss_and_grad(net, X, labels)
        net = adam_step(net, grads, adam, lr)
        if it % 500 == 0 or it == n_iter:
            log.info("train iter %d loss %.4f", it, loss)
    acc = accuracy(net, Xva, yva)
    save_checkpoint(net, cfg.path("dense"), cfg.metadata("train", val_accuracy=acc))
    print(f"dense network: validation accuracy {acc:.4f}")
    return net, acc


def cmd_profile(cfg, oracle=None):
    """Measure ``profile.n_samples`` sparsity vectors; resumes a partial profile.

    A profile file with the same profile key and a prefix of the planned
    samples is continued from its last row, so an interrupted run ends with
    the same file as an uninterrupted one.
    """
    layers, shape = cfg.architecture()
    pc = cfg["profile"]
    n, trials = int(pc["n_samples"]), int(pc["trials"])
    widths = [spec.c for spec in layers]
    n_out = layers[-1].d
    planned = sample_sparsities(widths, n_out, n, seed=int(pc["seed"]))
    key = _profile_key(cfg)
    meta = cfg.metadata("profile", profile_key=key, n_samples=n, trials=trials)
    names = [spec.name or f"layer{u + 1}" for u, spec in enumerate(layers)]
    path = cfg.path("profile")
    cfg.prepare_output()

    done = _resumable_rows(path, key, planned)
    if done:
        log.info("profile: resuming after %d of %d samples", len(done), n)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        write_profile_head(fh, names, meta)
        append_profile_rows(fh, done)
    os.replace(tmp, path)

    oracle = oracle if oracle is not None else build_oracle(cfg)
    samples = list(done)
    with open(path, "a") as fh:
        for k in range(len(done), n):
            try:
                smp = collect(oracle, [planned[k]], trials=trials, start_index=k)
            except OracleError as exc:
                log.error("profile: oracle failed at sample %d (s=%s): %s",
                          k, planned[k].tolist(), exc)
                raise
            append_profile_rows(fh, smp)
            samples.extend(smp)

    _, E = samples_to_arrays(samples)
    S = np.asarray(planned, dtype=np.int64)
    print(f"profile: {n} samples x {trials} trials, mean energy {E.mean():.6g} J "
          f"(min {E.min():.6g}, max {E.max():.6g})")
    for u, nm in enumerate(names):
        print(f"  {nm}: s in [{S[:, u].min()}, {S[:, u].max()}] of {widths[u]}")
    return samples


def _profile_key(cfg):
    part = {k: cfg[k] for k in ("architecture", "input_shape", "n_classes", "oracle", "profile")}
    blob = json.dumps(part, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _resumable_rows(path, key, planned):
    if not path.exists():
        return []
    try:
        samples, _, meta = load_profile(path)
    except (ValueError, OSError) as exc:
        log.warning("profile: ignoring unreadable %s (%s)", path, exc)
        return []
    if meta.get("profile_key") != key or len(samples) > len(planned) or any(
            tuple(smp.s) != tuple(int(v) for v in s) for smp, s in zip(samples, planned)):
        log.warning("profile: %s was made with different settings; starting over", path)
        return []
    return samples


def cmd_fit_energy(cfg):
    """Fit the bilinear energy model to the profile; writes the model and its error curve."""
    cfg.prepare_output()
    layers, _ = cfg.architecture()
    samples, _, pmeta = load_profile(cfg.path("profile"))
    if samples and len(samples[0].s) != len(layers) + 1:
        raise ConfigError("profile columns do not match the architecture")
    ec = dict(cfg["energy_fit"])
    test_fraction = float(ec.pop("test_fraction"))
    split_seed = int(ec.pop("split_seed"))
    model, tr, te = fit_energy_model(samples, test_fraction, split_seed, **ec)
    S, E = samples_to_arrays(samples)
    train_err = relative_test_error(model, S[tr], E[tr])
    test_err = relative_test_error(model, S[te], E[te]) if te.size else float("nan")
    meta = cfg.metadata("fit-energy", profile_hash=pmeta.get("config_hash"),
                        n_train=int(tr.size), n_test=int(te.size),
                        train_error=train_err, test_error=test_err)
    save_energy_model(cfg.path("model"), model, meta)
    with open(cfg.path("fit_curve"), "w") as fh:
        fh.write("# metadata " + json.dumps(meta, sort_keys=True) + "\n")
        fh.write("iteration\ttrain_rel_error\ttest_rel_error\n")
        for it, a, b in model.history_:
            fh.write(f"{it}\t{a!r}\t{b!r}\n")
    print("iteration  train_rel_error  test_rel_error")
    for it, a, b in model.history_:
        print(f"{it:9d}  {a:15.6g}  {b:14.6g}")
    print(f"energy model: train error {train_err:.4g}, test error {test_err:.4g}")
    return model, train_err, test_err


def resolve_budget(cfg, model, dense):
    sc = cfg["solver"]
    if sc["budget"] is not None:
        return float(sc["budget"])
    dense_e = model.energy(full_widths(dense.sparsity(), dense.n_out))
    return float(sc["budget_fraction"]) * dense_e


def cmd_compress(cfg):
    """Run the constrained solver on the dense checkpoint; writes checkpoint and trace.

    The trace is written even when the iteration cap is hit.
    """
    cfg.prepare_output()
    from .solver import IterationLimitError

    layers, _ = cfg.architecture()
    dense, _ = load_checkpoint(cfg.path("dense"))
    _check_arch(cfg, dense, "dense checkpoint")
    model, _ = _load_model(cfg, layers)
    budget = resolve_budget(cfg, model, dense)
    sconf = cfg.solver_config(budget)
    Xtr, ytr, _, _ = load_dataset(cfg)
    names = [spec.name for spec in layers]

    def report(row):
        if row.iteration % 100 == 0:
            log.info("compress iter %d energy %.6g max_violation %.3g z %.3g",
                     row.iteration, row.energy, row.max_violation, row.z)

    log.info("compress: budget %.6g J", budget)
    try:
        result = compress(dense, model, sconf, _stream(cfg, Xtr, ytr, 1), callback=report)
    except IterationLimitError as exc:
        write_trace(cfg.path("trace"), exc.trace, names,
                    cfg.metadata("compress", budget=budget, converged=False))
        raise
    net = result.network
    energy = model.energy(result.s)
    meta = cfg.metadata("compress", budget=budget, beta=result.beta,
                        iterations=result.iterations, energy=energy,
                        s=[float(v) for v in result.s], phi=[int(v) for v in net.sparsity()])
    write_trace(cfg.path("trace"), result.trace, names, cfg.metadata(
        "compress", budget=budget, beta=result.beta, converged=True))
    save_checkpoint(net, cfg.path("compressed"), meta)
    print(f"compressed in {result.iterations} iterations: estimated energy {energy:.6g} J "
          f"<= budget {budget:.6g} J, widths {net.sparsity().tolist()}")
    return result, budget


def cmd_finetune(cfg):
    """Masked fine-tuning of the compressed checkpoint, distilling from the dense one."""
    cfg.prepare_output()
    net, cmeta = load_checkpoint(cfg.path("compressed"))
    _check_arch(cfg, net, "compressed checkpoint")
    fc = cfg["finetune"]
    teacher = None
    if float(fc["kd_weight"]):
        teacher, _ = load_checkpoint(cfg.path("dense"))
    Xtr, ytr, Xva, yva = load_dataset(cfg)
    before = accuracy(net, Xva, yva)
    mask = mask_from_network(net)
    tuned = finetune(net, mask, _stream(cfg, Xtr, ytr, 2), int(fc["iterations"]),
                     lr=float(fc["lr"]), teacher=teacher, kd_weight=float(fc["kd_weight"]),
                     kd_temperature=float(fc["kd_temperature"]),
                     lr_schedule=fc.get("lr_schedule", "constant"))
    after = accuracy(tuned, Xva, yva)
    meta = cfg.metadata("finetune", budget=cmeta.get("budget"), s=cmeta.get("s"),
                        accuracy_before=before, accuracy_after=after,
                        phi=[int(v) for v in tuned.sparsity()])
    save_checkpoint(tuned, cfg.path("finetuned"), meta)
    print(f"fine-tuned: validation accuracy {before:.4f} -> {after:.4f}")
    return tuned, before, after


# evaluation trial seeds are kept away from the profiling seeds
_EVAL_TRIAL_BASE = 1 << 30


def cmd_evaluate(cfg, checkpoint=None, oracle=None):
    """Accuracy, estimated and measured energy and per-layer widths of a checkpoint."""
    cfg.prepare_output()
    layers, _ = cfg.architecture()
    ckpt = Path(checkpoint) if checkpoint else cfg.path("finetuned")
    net, _ = load_checkpoint(ckpt)
    _check_arch(cfg, net, f"checkpoint {ckpt}")
    model, mmeta = _load_model(cfg, layers)
    _, _, Xva, yva = load_dataset(cfg)
    if len(Xva) and tuple(Xva.shape[1:]) != tuple(net.input_shape):
        raise ConfigError("validation data does not match the network input shape")
    acc = accuracy(net, Xva, yva)
    phi = net.sparsity()
    s = full_widths(phi, net.n_out)
    predicted = model.energy(s)
    oracle = oracle if oracle is not None else build_oracle(cfg)
    trials = int(cfg["evaluate"]["trials"])
    measured = float(np.mean([oracle.measure(s, trial_seed=_EVAL_TRIAL_BASE + t)
                              for t in range(trials)]))
    table = [{"layer": spec.name or f"layer{u + 1}", "width": spec.c, "kept": int(phi[u]),
              "kept_fraction": phi[u] / spec.c} for u, spec in enumerate(layers)]
    report = {
        "checkpoint": ckpt.name,
        "metadata": cfg.metadata("evaluate"),
        "accuracy": acc,
        "predicted_energy": predicted,
        "measured_energy": measured,
        "relative_gap": abs(predicted - measured) / measured,
        "model_test_error": mmeta.get("test_error"),
        "layers": table,
    }
    with open(cfg.path("report"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{ckpt.name}: top-1 accuracy {acc:.4f}")
    print(f"energy: estimated {predicted:.6g} J, measured {measured:.6g} J "
          f"(gap {report['relative_gap']:.3%})")
    print("layer      width  kept  fraction")
    for row in table:
        print(f"{row['layer']:<10} {row['width']:5d} {row['kept']:5d}  {row['kept_fraction']:8.3f}")
    return report


def cmd_run(cfg):
    """Every stage in order, from dense training to evaluation."""
    cmd_train(cfg)
    cmd_profile(cfg)
    cmd_fit_energy(cfg)
    cmd_compress(cfg)
    cmd_finetune(cfg)
    return cmd_evaluate(cfg)


# -- verify ------------------------------------------------------------------

VERIFY_VERSION = 1
PROX_OBJECTIVE_TOL = 1e-8
GRAD_TOL = 1e-9


def make_prox(threshold_scale=1.0):
    """The closed-form channel prox; ``threshold_scale`` != 1 gives a broken variant."""

    def prox(w_bar, B, s, y, alpha, rho1):
        a = channel_norms_sq(w_bar, B)
        order = np.argsort(-a, kind="stable")
        ranks = np.empty(a.size, dtype=np.intp)
        ranks[order] = np.arange(a.size)
        keep = a > threshold_scale * prox_thresholds(a.size, s, y, alpha, rho1)[ranks]
        w = w_bar.copy()
        w[:, ~keep] = 0.0
        return w, keep

    return prox


def generate_verify_instances(n_prox=20, n_grad=20, seed=0, max_channels=10):
    rng = np.random.default_rng(seed)
    prox = [random_prox_instance(rng, int(rng.integers(1, max_channels + 1))).to_dict()
            for _ in range(n_prox)]
    grad = []
    for _ in range(n_grad):
        U = int(rng.integers(1, 6))
        grad.append({"intercept": float(rng.uniform(0, 1)),
                     "coefficients": rng.uniform(0, 1, U).tolist(),
                     "s": rng.uniform(1, 64, U + 1).tolist()})
    return {"format_version": VERIFY_VERSION, "prox": prox, "grad": grad}


def load_verify_instances(path=None):
    if path is None:
        text = resources.files("ecc").joinpath("resources/verify_instances.json").read_text()
        doc = json.loads(text)
    else:
        with open(path) as fh:
            doc = json.load(fh)
    if doc.get("format_version") != VERIFY_VERSION:
        raise ConfigError(f"unsupported instance file version {doc.get('format_version')}")
    return doc


@dataclass
class VerifyResult:
    kind: str
    index: int
    passed: bool
    gap: float
    detail: str = ""


def verify_prox(inst, prox=None):
    if inst.c > MAX_BRUTE_FORCE_CHANNELS:
        raise ValueError(f"instance has {inst.c} channels; brute force allows {MAX_BRUTE_FORCE_CHANNELS}")
    prox = prox or make_prox()
    w, keep = prox(inst.w_bar, inst.B, inst.s, inst.y, inst.alpha, inst.rho1)
    _, best, best_keep = brute_force_prox(inst)
    gap = prox_objective(w, inst) - best
    same = bool(np.array_equal(np.asarray(keep), best_keep))
    return same and abs(gap) <= PROX_OBJECTIVE_TOL, gap, same


def verify_grad(item):
    a0 = float(item["intercept"])
    a = np.asarray(item["coefficients"], dtype=np.float64)
    s = np.asarray(item["s"], dtype=np.float64)
    g = bilinear_grad(a, s)
    # the output width is fixed, so only the first U entries are differentiated
    fd = finite_diff_grad(lambda x: bilinear_energy(a0, a, np.append(x, s[-1])), s[:-1], h=1e-3)
    gap = float(np.max(np.abs(g - fd)) / max(1.0, float(np.max(np.abs(g)))))
    return gap <= GRAD_TOL, gap


def cmd_verify(doc, prox=None):
    """Audit the prox against exhaustive search and the energy gradient against finite differences."""
    results = []
    for i, d in enumerate(doc.get("prox", [])):
        ok, gap, same = verify_prox(ProxInstance.from_dict(d), prox)
        results.append(VerifyResult("prox", i, ok, gap, "" if same else "keep pattern differs"))
    for i, item in enumerate(doc.get("grad", [])):
        ok, gap = verify_grad(item)
        results.append(VerifyResult("grad", i, ok, gap))
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f" ({r.detail})" if r.detail else ""
        print(f"{status} {r.kind}[{r.index}] gap {r.gap:.3e}{extra}")
    n_ok = sum(r.passed for r in results)
    print(f"{n_ok}/{len(results)} checks passed")
    return results


def measure_simulated(cfg, exchange_doc):
    """Energy of one exchange request on the configured simulated device."""
    sim = simulated_device(cfg["oracle"]["simulated"], exchange_doc["architecture"],
                           exchange_doc["input_shape"])
    return sim.measure(exchange_doc["s"], trial_seed=exchange_doc["trial_seed"])


__all__ = [
    "ARTIFACTS",
    "ConfigError",
    "PipelineConfig",
    "cmd_compress",
    "cmd_evaluate",
    "cmd_finetune",
    "cmd_fit_energy",
    "cmd_profile",
    "cmd_run",
    "cmd_train",
    "cmd_verify",
    "default_config",
    "generate_verify_instances",
    "load_verify_instances",
    "make_prox",
]
