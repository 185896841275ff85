import sys
from pathlib import Path

# Add the src directory to the Python path
src_dir = Path(__file__).parent.parent
sys.path.append(str(src_dir.parent))

from src.config import config
from src.database import init_db


def main(output_dir: str = "output") -> str:
    """Create the run registry tables for an output directory"""
    Path(output_dir).mkdir(parents=True, exist_ok=True)
    url = config.database_url(Path(output_dir))
    init_db(url)
    return url


if __name__ == '__main__':
    url = main(sys.argv[1] if len(sys.argv) > 1 else "output")
    print(f"Registry tables created at {url}")
