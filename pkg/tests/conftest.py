import os
import sys
from pathlib import Path

# pin BLAS threads before anything imports numpy, so reruns are bitwise stable
os.environ.setdefault("VIDPRED_DETERMINISTIC", "1")
sys.path.insert(0, str(Path(__file__).parent))
