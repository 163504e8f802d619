import sys

from sigllm.cli import main

sys.exit(main())
