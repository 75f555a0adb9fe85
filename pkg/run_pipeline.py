import os
import subprocess
import sys
import time

STEPS = ["gen-corpus", "prune", "finetune", "route", "eval", "report"]


def run_command(command, cwd=None):
    try:
        subprocess.run(command, check=True, cwd=cwd)
        return True
    except subprocess.CalledProcessError as e:
        print(f"Error running command: {' '.join(command)}")
        print(f"Exit code: {e.returncode}")
        return False


def run_pipeline(config="configs/default.json", out="runs/default", extra=None):
    print("Starting prompt-routed pruning pipeline...")

    current_dir = os.path.dirname(os.path.abspath(__file__))
    extra = extra or []

    for i, step in enumerate(STEPS, start=1):
        print(f"\n{i}. Running {step}...")
        started = time.time()
        command = [sys.executable, "run.py", step, "--config", config, "--out", out, *extra]
        if not run_command(command, cwd=current_dir):
            print(f"Pipeline stopped at step '{step}'")
            return 1
        print(f"{step} finished in {time.time() - started:.1f}s")

    print("\nPipeline finished successfully!")
    print(f"Artifacts written to: {out}")
    return 0


if __name__ == "__main__":
    # usage: python run_pipeline.py [CONFIG] [OUT] [extra flags...]
    args = sys.argv[1:]
    config = args[0] if len(args) > 0 else "configs/default.json"
    out = args[1] if len(args) > 1 else "runs/default"
    sys.exit(run_pipeline(config, out, args[2:]))
