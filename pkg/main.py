import sys

from fusion_stereo.cli import main

if __name__ == "__main__":
    sys.exit(main())
