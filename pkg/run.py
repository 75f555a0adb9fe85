from promptprune.main import main

if __name__ == "__main__":
    main()
    # python run.py prune --config configs/default.json --out runs/default
    # python run.py eval --out runs/default
