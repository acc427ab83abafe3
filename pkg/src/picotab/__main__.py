from picotab.cli import main

main()
