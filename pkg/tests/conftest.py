import sys
from pathlib import Path

# so test modules can import the shared helpers/oracles without packaging them
sys.path.insert(0, str(Path(__file__).parent))
