"""
psc - Bayesian principal stratification for continuous treatments

Fits a Gaussian-process / Dirichlet-process model of potential mediators and
summarizes principal causal effects from the posterior draws.

Usage:
    python main.py simulate --out data/sim.csv
    python main.py fit data/sim.csv --config data/sim.config.json --out-dir output
    python main.py estimate output/chain0.drawlog --data data/sim.csv --a 2.5 --out output/pce.csv

Requirements:
    pip install -r requirements.txt
"""

import sys
import os

# Add src to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.app import main

if __name__ == "__main__":
    sys.exit(main())
