import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

# Add the backend directory to the path so the runner works as a script
current_dir = os.path.dirname(os.path.abspath(__file__))
backend_dir = os.path.dirname(os.path.dirname(current_dir))
if backend_dir not in sys.path:
    sys.path.append(backend_dir)

from app.core.errors import QsdError, ScenarioError
from app.services.artifacts import ArtifactWriter, resolve_output_dir
from app.services.scenario_loader import list_scenarios, load_scenario
from app.services.scenario_pipeline import ScenarioPipeline

logger = logging.getLogger("qsd-runner")


def parse_overrides(pairs: List[str], extra: List[str]) -> Dict[str, str]:
    """
    Collect overrides from repeated --override key=value and free-form --key value pairs.

    Raises:
        ScenarioError: on malformed pairs
    """
    overrides: Dict[str, str] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ScenarioError(f"Override {pair!r} is not key=value", field=key or None)
        overrides[key.strip()] = value.strip()

    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--"):
            raise ScenarioError(f"Unexpected argument {token!r}")
        key, sep, value = token[2:].partition("=")
        if not sep:
            if i + 1 >= len(extra):
                raise ScenarioError(f"Override --{key} has no value", field=key)
            value = extra[i + 1]
            i += 1
        overrides[key] = value
        i += 1
    return overrides


def run(scenario_name: str, out: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> int:
    """
    Load, run and write one scenario.

    Returns:
        int: 0 on success, 2 for scenario errors, 3 for numerical errors, 4 for simulation errors, 1 otherwise
    """
    try:
        scenario = load_scenario(scenario_name, overrides)
        writer = ArtifactWriter(resolve_output_dir(scenario.name, out))
        results = ScenarioPipeline(scenario, writer).run()
        logger.info(f"Scenario {scenario.name} finished: {results}")
        print(f"✅ {scenario.name}: wrote {len(writer.files)} files to {writer.out_dir}")
        return 0
    except QsdError as e:
        logger.error(f"{type(e).__name__}: {e}")
        print(f"❌ {scenario_name}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error running {scenario_name}: {str(e)}")
        print(f"❌ {scenario_name}: {e}")
        return 1


def build_parser() -> argparse.ArgumentParser:
    # no prefix matching: free-form --d must not resolve to --dt
    parser = argparse.ArgumentParser(description="Run a quasi-stationary distribution scenario", allow_abbrev=False)
    parser.add_argument("scenario", nargs="?", help="Built-in scenario name or path to a YAML file")
    parser.add_argument("--scenario", dest="scenario_flag", help="Same as the positional argument")
    parser.add_argument("--out", help="Output directory (default: $QSD_OUTPUT_DIR/<name> or ./output/<name>)")
    parser.add_argument("--seed", type=int, help="Random seed")
    parser.add_argument("--particles", type=int, help="Number of Fleming-Viot particles")
    parser.add_argument("--epsilon", type=float, help="Killing bound for diffusion particle systems")
    parser.add_argument("--dt", type=float, help="Euler time step")
    parser.add_argument("--t-max", dest="t_max", type=float, help="Time horizon")
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="Override any scenario value, e.g. model.lambda=1.1 (repeatable)")
    parser.add_argument("--list", action="store_true", help="List the built-in scenarios and exit")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )

    if args.list:
        for name, description in list_scenarios():
            print(f"{name:20s} {description}")
        return 0

    scenario_name = args.scenario_flag or args.scenario
    if not scenario_name:
        parser.error("a scenario name or path is required")

    try:
        overrides = parse_overrides(args.override, extra)
    except ScenarioError as e:
        print(f"❌ {e}")
        return e.exit_code
    for key in ("seed", "particles", "epsilon", "dt", "t_max"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return run(scenario_name, args.out, overrides)


if __name__ == "__main__":
    sys.exit(main())
