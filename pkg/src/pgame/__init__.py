"""PGA-MAP-Elites and baselines for quality-diversity neuroevolution."""
