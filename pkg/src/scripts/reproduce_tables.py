"""
Run the benchmark tables one configuration at a time
"""

from pathlib import Path
import os
import sys

# Add src to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from dotenv import load_dotenv
import pandas as pd

from core.experiment import ExperimentConfig, run_experiment

CONFIG_DIR = Path(__file__).parent.parent.parent / 'config'

STEPS = [
    ("Model 1 (GP prior)", 'model1_gp.env', False),
    ("Model 1 (orthogonal GP baseline)", 'model1_ogp.env', False),
    ("Model 2 (GP prior)", 'model2_gp.env', False),
    ("Model 3 (surrogate from 7 x 7 runs)", 'model3_gp.env', False),
    ("Bivariate pair (outcome-wise vs joint)", 'bivariate.env', True),
]


def reproduce_tables(replications=None, output_root='results'):
    """Run every table configuration and collect the aggregate rows"""

    load_dotenv()
    workers = int(os.getenv('ORTHOCAL_THREADS', '1'))

    print("\n" + "="*60)
    print("OrthoCal - Benchmark Tables")
    print("="*60 + "\n")

    rows = []
    for i, (title, filename, compare) in enumerate(STEPS, 1):
        print(f"STEP {i}: {title}...")
        overrides = {'output_dir': str(Path(output_root) / Path(filename).stem), 'workers': workers}
        if replications is not None:
            overrides['replications'] = replications
        config = ExperimentConfig.from_file(CONFIG_DIR / filename, **overrides)

        try:
            record = run_experiment(config, progress=True, compare_outcomes=compare)
        except Exception as e:
            print(f"❌ Step {i} failed: {e}\n")
            continue

        table = record.table_frame()
        table.insert(0, 'experiment', Path(filename).stem)
        rows.append(table)
        print(table.to_string(index=False))
        if record.warning_categories:
            print(f"⚠️  Warnings: {', '.join(record.warning_categories)}")
        print(f"✅ Step {i} complete: {config.output_dir}\n")

    if not rows:
        print("❌ No experiment finished. Exiting.")
        return None

    combined = pd.concat(rows, ignore_index=True)
    output_file = Path(output_root) / 'all_tables.csv'
    output_file.parent.mkdir(parents=True, exist_ok=True)
    combined.to_csv(output_file, index=False)

    # Final summary
    print("="*60)
    print("✅ ALL TABLES COMPLETE")
    print("="*60)
    print(f"\nCombined table: {output_file}")
    print("="*60 + "\n")
    return combined


if __name__ == "__main__":
    reps = int(sys.argv[1]) if len(sys.argv) > 1 else None
    reproduce_tables(reps)
