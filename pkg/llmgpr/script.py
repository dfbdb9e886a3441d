"""Command-line interface of this package."""

import json
import logging
import sys
from typing import Any, List, Optional, Sequence

import click
import coloredlogs

import llmgpr
from llmgpr.config import CONFIG_FILES, Config
from llmgpr.dumper import ReportFormat
from llmgpr.errors import LLMGPRError
from llmgpr.evaluation import AblationFlags
from llmgpr.workspace import RUN_DIR_VARIABLE, Workspace, default_run_dir

logger = logging.getLogger(__name__)

CONTEXT = {"help_option_names": ["-h", "--help"]}
ALL_SECTIONS = ("data", "model", "qlora", "train", "ssl", "eval")
TRAINING_SECTIONS = ("data", "train", "qlora", "eval")

_defaults = Config(files=[])


def _epilog(*sections: str) -> str:
    keys = [k for s in sections for k in _defaults.keys_of(s)]
    return "\b\nConfig keys read:\n" + "\n".join("  " + k for k in keys)


def _command(name: str, *sections: str) -> Any:
    return cli.command(name, context_settings=CONTEXT, epilog=_epilog(*sections))


overrides_argument = click.argument(
    "overrides", nargs=-1, metavar="[SECTION.KEY=VALUE]..."
)
flags_option = click.option(
    "--flags",
    default=None,
    metavar="KEY=on|off,...",
    help="Ablation switches (seq, tokens, fusion, ssl, avg); default eval.flags.",
)
alpha_option = click.option(
    "--alpha", type=float, default=None, help="Fusion weight; default train.alpha."
)


class Options:
    """Global options shared by every command."""

    def __init__(
        self,
        run_dir: Optional[str],
        config_file: Optional[str],
        force: bool,
        seed: Optional[int],
    ) -> None:
        self.run_dir = run_dir
        self.config_file = config_file
        self.force = force
        self.seed = seed

    def workspace(self, overrides: Sequence[str] = ()) -> Workspace:
        """Return the workspace with the effective configuration."""
        files = list(CONFIG_FILES)
        if self.config_file:
            files.append(self.config_file)
        config = Config(files)
        for o in overrides:
            config.set_override(o)
        if self.seed is not None:
            config.set_override("train.seed={}".format(self.seed))
        path = self.run_dir or default_run_dir()
        logger.info("Run directory: %s", path)
        return Workspace(path, config, self.force)


def _flags(ws: Workspace, text: Optional[str]) -> AblationFlags:
    flags = AblationFlags.parse(ws.eval_config.flags if text is None else text)
    logger.info("Variant %s", flags.variant)
    return flags


@click.group(context_settings=CONTEXT)
@click.version_option(
    llmgpr.__version__, "-V", "--version", prog_name=llmgpr.__pkgname__
)
@click.option(
    "--run-dir",
    type=click.Path(file_okay=False),
    envvar=RUN_DIR_VARIABLE,
    help="Run directory [default: $LLMGPR_RUN_DIR or runs/<timestamp>].",
)
@click.option(
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False),
    help="Config file read after ~/.llmgpr.cfg and ./llmgpr.cfg.",
)
@click.option("--force", is_flag=True, help="Recompute existing checkpoints.")
@click.option("--seed", type=int, default=None, help="Override train.seed.")
@click.option("-v", "--verbose", is_flag=True, help="Show debug messages.")
@click.pass_context
def cli(
    ctx: click.Context,
    run_dir: Optional[str],
    config_file: Optional[str],
    force: bool,
    seed: Optional[int],
    verbose: bool,
) -> None:
    """Group next-POI recommendation with a quantized sequence model."""
    coloredlogs.install(
        level=logging.DEBUG if verbose else logging.INFO,
        logger=logging.getLogger(),
        fmt="%(levelname)8s %(message)s",
    )
    ctx.obj = Options(run_dir, config_file, force, seed)


# -----------------------------------------------------------------------------
# data
# -----------------------------------------------------------------------------
@_command("synth", "data")
@overrides_argument
@click.pass_obj
def synth(opts, overrides):
    # type: (Options, List[str])->None
    """Generate a synthetic dataset with planted preferences."""
    opts.workspace(overrides).synth()


@_command("ingest", "data")
@click.argument("checkins", type=click.Path(exists=True, dir_okay=False))
@click.argument("pois", type=click.Path(exists=True, dir_okay=False))
@click.argument("social", type=click.Path(exists=True, dir_okay=False))
@overrides_argument
@click.pass_obj
def ingest(opts, checkins, pois, social, overrides):
    # type: (Options, str, str, str, List[str])->None
    """Load check-in, POI, and social-edge files into the run directory."""
    opts.workspace(overrides).ingest(checkins, pois, social)


@_command("mine-groups", "data")
@overrides_argument
@click.pass_obj
def mine_groups(opts, overrides):
    # type: (Options, List[str])->None
    """Mine groups from co-visits of friends."""
    opts.workspace(overrides).mine_groups()


@_command("stats", "data", "eval")
@overrides_argument
@click.pass_obj
def stats(opts, overrides):
    # type: (Options, List[str])->None
    """Print the dataset statistics."""
    result = opts.workspace(overrides).stats()
    click.echo(json.dumps(result.as_dict(), indent=2))


# -----------------------------------------------------------------------------
# model
# -----------------------------------------------------------------------------
@_command("pretrain-base", "data", "model", "qlora", "train", "eval")
@overrides_argument
@click.pass_obj
def pretrain_base(opts, overrides):
    # type: (Options, List[str])->None
    """Pretrain, quantize, and freeze the base model."""
    opts.workspace(overrides).pretrain_base()


@_command("init-poi-emb", "data", "eval")
@overrides_argument
@click.pass_obj
def init_poi_emb(opts, overrides):
    # type: (Options, List[str])->None
    """Initialize POI embeddings from POI descriptions."""
    opts.workspace(overrides).init_poi_emb()


@_command("label-purposes", "data", "ssl", "eval")
@overrides_argument
@click.pass_obj
def label_purposes(opts, overrides):
    # type: (Options, List[str])->None
    """Label training sequences with trip purposes."""
    histogram = opts.workspace(overrides).label_purposes()
    for purpose, n in histogram.items():
        click.echo("{}\t{}".format(purpose, n))


@_command("pretrain-ssl", "ssl", *TRAINING_SECTIONS)
@flags_option
@overrides_argument
@click.pass_obj
def pretrain_ssl(opts, flags, overrides):
    # type: (Options, Optional[str], List[str])->None
    """Stage 1: purpose pretraining of the sequencing adapters."""
    ws = opts.workspace(overrides)
    ws.pretrain_ssl(_flags(ws, flags))


@_command("train-seq", *TRAINING_SECTIONS)
@flags_option
@overrides_argument
@click.pass_obj
def train_seq(opts, flags, overrides):
    # type: (Options, Optional[str], List[str])->None
    """Stage 2: next-POI training of the sequencing adapters."""
    ws = opts.workspace(overrides)
    ws.train_seq(_flags(ws, flags))


@_command("train-agg", *TRAINING_SECTIONS)
@flags_option
@alpha_option
@overrides_argument
@click.pass_obj
def train_agg(opts, flags, alpha, overrides):
    # type: (Options, Optional[str], Optional[float], List[str])->None
    """Stage 3: training of the aggregation adapters."""
    ws = opts.workspace(overrides)
    ws.train_agg(_flags(ws, flags), alpha)


# -----------------------------------------------------------------------------
# evaluation
# -----------------------------------------------------------------------------
@_command("eval", *TRAINING_SECTIONS)
@flags_option
@alpha_option
@click.option(
    "--format",
    "fmt",
    type=click.Choice([f.name.lower() for f in ReportFormat]),
    default="tsv",
    help="Format of the printed report.",
)
@overrides_argument
@click.pass_obj
def evaluate(opts, flags, alpha, fmt, overrides):
    # type: (Options, Optional[str], Optional[float], str, List[str])->None
    """Evaluate a variant; write report.json and report.tsv."""
    ws = opts.workspace(overrides)
    ws.evaluate(_flags(ws, flags), alpha)
    click.echo(ws.report_text(ReportFormat[fmt.upper()]), nl=False)


@_command("recommend", *TRAINING_SECTIONS)
@flags_option
@alpha_option
@overrides_argument
@click.pass_obj
def recommend(opts, flags, alpha, overrides):
    # type: (Options, Optional[str], Optional[float], List[str])->None
    """Write the top eval.top next POIs of every group."""
    ws = opts.workspace(overrides)
    path = ws.recommend(_flags(ws, flags), alpha, ws.eval_config.top)
    click.echo(str(path))


@_command("sweep", *ALL_SECTIONS)
@click.option(
    "--param", type=click.Choice(["r", "alpha"]), required=True, help="Swept knob."
)
@click.option(
    "--values",
    default=None,
    help="Space-separated values; default eval.sweep_r or eval.sweep_alpha.",
)
@flags_option
@overrides_argument
@click.pass_obj
def sweep(opts, param, values, flags, overrides):
    # type: (Options, str, Optional[str], Optional[str], List[str])->None
    """Retrain and evaluate for each value of r or alpha."""
    ws = opts.workspace(overrides)
    if values is None:
        grid = ws.eval_config.sweep_r if param == "r" else ws.eval_config.sweep_alpha
    else:
        conv = int if param == "r" else float
        try:
            grid = tuple(conv(v) for v in values.replace(",", " ").split())
        except ValueError:
            raise click.BadParameter(values, param_hint="--values") from None
    click.echo(ws.sweep(param, list(grid), _flags(ws, flags)), nl=False)  # type: ignore


@_command("pipeline", *ALL_SECTIONS)
@flags_option
@overrides_argument
@click.pass_obj
def pipeline(opts, flags, overrides):
    # type: (Options, Optional[str], List[str])->None
    """Run every stage after data preparation and evaluate."""
    ws = opts.workspace(overrides)
    ws.pipeline(_flags(ws, flags))
    click.echo(ws.report_text(), nl=False)


# -----------------------------------------------------------------------------
# entry points
# -----------------------------------------------------------------------------
def run(args: Sequence[str]) -> int:
    """Run the command line and return its exit code.

    Usage and configuration errors give 1, data errors 2, and training
    divergence 3.
    """
    try:
        result = cli.main(
            args=list(args), prog_name=llmgpr.__pkgname__, standalone_mode=False
        )
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except LLMGPRError as e:
        logger.error("%s", e)
        return e.exit_code
    return result if isinstance(result, int) else 0


def main() -> None:
    """Console-script entry point."""
    sys.exit(run(sys.argv[1:]))
