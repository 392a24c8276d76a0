"""Command-line entry points for offline workflows.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Diagnostics go to
stderr; reports and checkpoints go wherever --out/--report point.
"""

import json
import sys

import click

from .data import BiasedDatasetSpec, export_dataset, generate_biased_dataset
from .errors import AttnguideError
from .loop import LoopConfig, autoloop, compute_attention_metrics, \
    write_report
from .model import ClassifierConfig, TrainHyper, accuracy, build_classifier, \
    load_model, pretrain, save_model


def _load_spec(path_or_none, seed=None):
    fields = {}
    if path_or_none:
        with open(path_or_none) as fh:
            fields = json.load(fh)
    if seed is not None:
        fields["seed"] = seed
    return BiasedDatasetSpec(**fields)


@click.group()
def main_group():
    """Attention-guided annotation loop tools."""


@main_group.command("pretrain")
@click.option("--spec", "spec_path", type=click.Path(exists=True),
              default=None, help="Dataset spec JSON (defaults used if omitted).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Checkpoint file to write.")
@click.option("--epochs", type=int, default=None,
              help="Override the training epoch cap.")
def pretrain_cmd(spec_path, seed, out_path, epochs):
    """Train the classifier on the synthetic benchmark, save a checkpoint."""
    spec = _load_spec(spec_path, seed=seed)
    splits = generate_biased_dataset(spec)
    model = build_classifier(ClassifierConfig(), seed=seed)
    hyper = TrainHyper(seed=seed)
    if epochs is not None:
        hyper.epochs = epochs
    model, history = pretrain(model, splits["train"], splits["val"], hyper)
    save_model(out_path, model, epoch=len(history),
               val_accuracy=max(h["val_accuracy"] for h in history))
    biased = accuracy(model, splits["test_biased"])
    decorr = accuracy(model, splits["test_decorrelated"])
    click.echo(f"saved {out_path}  biased={biased:.4f} "
               f"decorrelated={decorr:.4f}", err=True)


@main_group.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True),
              default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def generate(spec_path, seed, out_dir):
    """Render the synthetic biased dataset to image files."""
    import os

    spec = _load_spec(spec_path, seed=seed)
    splits = generate_biased_dataset(spec)
    for name, ds in splits.items():
        export_dataset(ds, os.path.join(out_dir, name), spec=spec)
    click.echo(f"wrote {len(splits)} splits under {out_dir}", err=True)


@main_group.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True), help="Service config JSON.")
@click.option("--workdir", type=click.Path(), default=None)
def serve(config_path, workdir):
    """Run the HTTP annotation service."""
    from .service import ApiConfig
    from .service import serve as run_service

    run_service(ApiConfig.from_file(config_path), workdir=workdir)


def _run_loop(splits, checkpoint, strategy, rounds, seed, epochs, lr):
    if checkpoint:
        model, _ = load_model(checkpoint)
    else:
        model = build_classifier(ClassifierConfig(), seed=seed)
        model, _ = pretrain(model, splits["train"], splits["val"],
                            TrainHyper(seed=seed))
    cfg = LoopConfig(strategy=strategy, seed=seed)
    if epochs is not None:
        cfg.epochs = epochs
    if lr is not None:
        cfg.lr = lr
    session = autoloop(splits, model, cfg, rounds=rounds)
    return session


@main_group.command("autoloop")
@click.option("--spec", "spec_path", type=click.Path(exists=True),
              default=None)
@click.option("--checkpoint", type=click.Path(exists=True), default=None,
              help="Pretrained checkpoint (trained from scratch if omitted).")
@click.option("--strategy", default="attention", show_default=True)
@click.option("--rounds", type=int, default=5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--report", "report_path", required=True, type=click.Path())
def autoloop_cmd(spec_path, checkpoint, strategy, rounds, seed, epochs, lr,
                 report_path):
    """Headless annotation loop with the simulated annotator."""
    spec = _load_spec(spec_path, seed=seed)
    splits = generate_biased_dataset(spec)
    session = _run_loop(splits, checkpoint, strategy, rounds, seed, epochs,
                        lr)
    write_report(report_path, session.metric_history, strategy)
    last = session.metric_history[-1]
    click.echo(f"round={last['round']} "
               f"decorrelated={last['accuracy_decorrelated']:.4f}", err=True)


@main_group.command()
@click.option("--spec", "spec_path", type=click.Path(exists=True),
              default=None)
@click.option("--strategies", default="attention,random", show_default=True)
@click.option("--seeds", default="0", show_default=True,
              help="Comma-separated seed list.")
@click.option("--rounds", type=int, default=5, show_default=True)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--report", "report_path", required=True, type=click.Path())
def compare(spec_path, strategies, seeds, rounds, epochs, lr, report_path):
    """Run every strategy x seed combination and concatenate the reports."""
    import csv

    from .loop import REPORT_COLUMNS

    strategy_list = [s.strip() for s in strategies.split(",") if s.strip()]
    seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    if not strategy_list or not seed_list:
        raise click.UsageError("need at least one strategy and one seed")
    rows = []
    for seed in seed_list:
        spec = _load_spec(spec_path, seed=seed)
        splits = generate_biased_dataset(spec)
        pretrained = None
        for strategy in strategy_list:
            session = _run_loop(splits, pretrained, strategy, rounds, seed,
                                epochs, lr)
            for row in session.metric_history:
                rows.append((seed, strategy, row))
            click.echo(f"seed={seed} strategy={strategy} done", err=True)
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed"] + list(REPORT_COLUMNS))
        for seed, strategy, row in rows:
            writer.writerow([seed, row["round"], strategy] + [
                repr(float(row.get(k, 0.0)))
                for k in ("accuracy_biased", "accuracy_decorrelated",
                          "attention_in_target", "attention_in_distractor",
                          "loss_pos", "loss_neg", "loss_c")])


@main_group.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--spec", "spec_path", type=click.Path(exists=True),
              default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--limit", type=int, default=0, show_default=True,
              help="Cap on images per split for attention metrics (0 = all).")
def eval_cmd(checkpoint, spec_path, seed, limit):
    """Report accuracy and attention metrics for a checkpoint."""
    model, _ = load_model(checkpoint)
    spec = _load_spec(spec_path, seed=seed)
    splits = generate_biased_dataset(spec)
    out = {
        "accuracy_biased": accuracy(model, splits["test_biased"]),
        "accuracy_decorrelated": accuracy(model,
                                          splits["test_decorrelated"]),
    }
    out.update(compute_attention_metrics(model, splits["test_decorrelated"],
                                         limit=limit, cam_class=1))
    click.echo(json.dumps(out, indent=2))


def main(argv=None):
    """Entry point with the documented exit-code contract."""
    try:
        main_group.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.ClickException as exc:
        exc.show(file=sys.stderr)
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except AttnguideError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
