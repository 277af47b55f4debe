#!/usr/bin/env python3
"""Script to build the standalone filmseg executable."""

import os
import sys
import shutil
import subprocess
from pathlib import Path

EXECUTABLE = 'filmseg.exe' if sys.platform == 'win32' else 'filmseg'


def clean_build():
    """Clean build directories."""
    print("Cleaning build directories...")
    for dir_name in ['build', 'dist']:
        if os.path.exists(dir_name):
            shutil.rmtree(dir_name)

    for spec_file in Path('.').glob('*.spec'):
        spec_file.unlink()


def build_executable():
    """Build the executable using PyInstaller."""
    print("Building executable...")

    cmd = [
        'pyinstaller',
        '--name=filmseg',
        '--onefile',
        '--clean',
        '--add-data=README.md:.',
        # scipy loads its compiled submodules lazily
        '--collect-submodules=scipy.ndimage',
        '--collect-submodules=scipy.special',
        '--paths=src',
        'src/filmseg/cli.py'
    ]
    subprocess.run(cmd, check=True)


def smoke_test():
    """Run one cheap gradient check with the frozen binary."""
    executable = os.path.join('dist', EXECUTABLE)
    print(f"Smoke testing {executable}...")
    subprocess.run([executable, 'gradcheck', '--check', 'add'], check=True)


def main():
    """Main build script."""
    try:
        clean_build()
        build_executable()
        smoke_test()
    except subprocess.CalledProcessError as e:
        print(f"Error during build: {e}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"Unexpected error: {e}", file=sys.stderr)
        sys.exit(1)

    print("\nBuild complete!")
    print(f"Executable location:\n  dist/{EXECUTABLE}")


if __name__ == '__main__':
    main()
