#!/usr/bin/env python3
"""Mine log templates from raw lines and map each line to a key id.

The miner routes lines through a fixed-depth tree (token count, then leading
tokens) and merges lines whose token overlap clears the similarity threshold,
promoting the differing positions to wildcards. Freezing the table makes it
immutable: new message shapes map to the reserved UNSEEN key.
"""

from logsentinel import MaskingRule, TemplateMiner, load_templates

LINES = [
    "Receiving block blk_3587508140051953248 src /10.251.42.84:57069 dest /10.251.42.84:50010",
    "Receiving block blk_5402003568334525940 src /10.251.214.112:49318 dest /10.251.214.112:50010",
    "PacketResponder 1 for block blk_38865049064139660 terminating",
    "PacketResponder 0 for block blk_-6952295868487656571 terminating",
    "BLOCK NameSystem.allocateBlock /user/root/rand/_temporary/part-00001 blk_7888946331804732825",
    "Verification succeeded for blk_-1547954353065580372",
    "Verification succeeded for blk_6996194389878584395",
    "Deleting block blk_1781953582842324563 file /data/current/subdir33/blk_1781953582842324563",
]

masking = (
    MaskingRule(r"blk_-?\d+"),                    # block ids
    MaskingRule(r"(/?\d{1,3}(\.\d{1,3}){3})(:\d+)?"),  # ip:port
    MaskingRule(r"/[\w./_-]*part-\d+\S*"),        # job paths
)

miner = TemplateMiner(sim_threshold=0.5, masking_rules=masking)
print("line -> key id")
for line in LINES:
    key = miner.parse_line(line)
    print(f"  [{key}] {line[:68]}")

print("\nmined templates:")
for template in miner.templates:
    print(f"  key {template.key_id} (x{template.match_count}): {template.text()}")

table = miner.freeze()
table.save("/tmp/logsentinel_demo_templates.tsv")
reloaded = load_templates("/tmp/logsentinel_demo_templates.tsv", masking_rules=masking)

probe = "Receiving block blk_999 src /10.0.0.1:50010 dest /10.0.0.2:50010"
novel = "Completely novel message shape never seen before at all"
print(f"\nfrozen table: {len(table)} templates (saved + reloaded identically)")
print(f"  known shape -> key {reloaded.parse_line(probe)}")
print(f"  novel shape -> key {reloaded.parse_line(novel)} (UNSEEN)")
