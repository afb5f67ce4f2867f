#!/usr/bin/env python3
"""
Entry script for the branchdiff command line
Checks dependencies and environment settings, then runs one subcommand
"""

import os
import sys
from pathlib import Path

# Make the package importable from a source checkout
sys.path.insert(0, str(Path(__file__).parent))


def check_dependencies():
    """Check if all required dependencies are installed"""
    required_packages = [
        ("numpy", "NumPy"),
        ("scipy", "SciPy"),
        ("pydantic", "Pydantic"),
        ("dotenv", "python-dotenv"),
    ]

    missing = []
    for package, name in required_packages:
        try:
            __import__(package)
        except ImportError:
            missing.append((package, name))
            print(f"✗ {name} is NOT installed", file=sys.stderr)

    if missing:
        print("\n⚠️  Missing dependencies detected!", file=sys.stderr)
        print("Install them with:", file=sys.stderr)
        print("pip install -r requirements.txt", file=sys.stderr)
        return False

    return True


def check_env_vars():
    """Check optional environment settings"""
    from dotenv import load_dotenv
    load_dotenv()

    threads = os.getenv("BRANCHDIFF_THREADS")
    if threads and not threads.isdigit():
        print(f"✗ BRANCHDIFF_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return False

    output_dir = os.getenv("BRANCHDIFF_OUTPUT_DIR")
    if output_dir and not Path(output_dir).is_dir():
        print(f"⚠ BRANCHDIFF_OUTPUT_DIR={output_dir} does not exist yet; it will be created on write",
              file=sys.stderr)

    return True


def main():
    """Main entry function"""
    if not check_dependencies():
        sys.exit(2)
    if not check_env_vars():
        sys.exit(2)

    from branchdiff.cli import main as cli_main

    try:
        sys.exit(cli_main(sys.argv[1:]))
    except KeyboardInterrupt:
        print("\n\nInterrupted", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
