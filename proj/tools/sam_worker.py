#!/usr/bin/env python3
"""JSON-lines worker hosting a SAM or MedSAM model for the `sam` and `medsam`
segmenter kinds.

One request per line on stdin, one reply per line on stdout. Requests:

  {"op": "load", "model": "sam"|"medsam", "checkpoint": path, "device": "cpu"}
  {"op": "segment", "height": H, "width": W, "pixels": [...], "prompt": P}
  {"op": "finetune", "height": H, "width": W, "pixels": [...], "lr": x,
   "classes": [P + {"target": [0|1, ...]}, ...]}
  {"op": "quit"}

P is {"class": k, "points": [[row, col, positive], ...], "box": [r0, c0, r1, c1] | null}.
Pixels and masks are row-major. Replies are {"ok": true, ...} or
{"ok": false, "error": message, "kind": "io"|"shape"|...}.

Needs torch and segment_anything (https://github.com/facebookresearch/segment-anything).
The image encoder stays frozen; fine-tuning updates the prompt encoder and
mask decoder with Adam.
"""
import json
import sys


class WorkerError(Exception):
    def __init__(self, message, kind=""):
        super().__init__(message)
        self.kind = kind


def import_backend():
    try:
        import numpy as np
        import torch
        from segment_anything import SamPredictor, sam_model_registry
    except ImportError as e:
        raise WorkerError("segment_anything backend unavailable: %s (pip install torch segment-anything)" % e,
                          "io")
    return np, torch, SamPredictor, sam_model_registry


class Worker:
    def __init__(self):
        self.model = None
        self.predictor = None
        self.optimizer = None
        self.device = "cpu"
        self.last_image_key = None

    def load(self, req):
        np, torch, SamPredictor, registry = import_backend()
        self.np, self.torch = np, torch
        self.device = req.get("device") or "cpu"
        try:
            sam = registry["vit_b"](checkpoint=req["checkpoint"])
        except FileNotFoundError as e:
            raise WorkerError("cannot read weights: %s" % e, "io")
        except (RuntimeError, KeyError) as e:
            raise WorkerError("weights do not match vit_b: %s" % e, "io")
        sam.to(self.device)
        sam.image_encoder.requires_grad_(False)
        self.model = sam
        self.predictor = SamPredictor(sam)
        params = list(sam.prompt_encoder.parameters()) + list(sam.mask_decoder.parameters())
        self.optimizer = torch.optim.Adam(params, lr=1e-5)
        return {}

    def set_image(self, req):
        if self.predictor is None:
            raise WorkerError("no model loaded")
        np = self.np
        h, w = int(req["height"]), int(req["width"])
        pixels = req["pixels"]
        if len(pixels) != h * w:
            raise WorkerError("expected %d pixels, got %d" % (h * w, len(pixels)), "shape")
        key = (h, w, hash(tuple(pixels)))
        if key != self.last_image_key:
            gray = np.asarray(pixels, dtype=np.float64).reshape(h, w)
            lo, hi = gray.min(), gray.max()
            scaled = (gray - lo) / (hi - lo) if hi > lo else np.zeros_like(gray)
            rgb = np.repeat((scaled * 255.0).round().astype(np.uint8)[:, :, None], 3, axis=2)
            self.predictor.set_image(rgb)
            self.last_image_key = key
        return h, w

    def prompt_arrays(self, prompt):
        np = self.np
        coords = labels = box = None
        points = prompt.get("points") or []
        if points:
            coords = np.array([[c, r] for r, c, _ in points], dtype=np.float32)
            labels = np.array([1 if p else 0 for _, _, p in points], dtype=np.int64)
        if prompt.get("box"):
            r0, c0, r1, c1 = prompt["box"]
            box = np.array([c0, r0, c1, r1], dtype=np.float32)
        if coords is None and box is None:
            raise WorkerError("prompt carries neither points nor a box", "shape")
        return coords, labels, box

    def segment(self, req):
        h, w = self.set_image(req)
        coords, labels, box = self.prompt_arrays(req["prompt"])
        _, _, low_res = self.predictor.predict(point_coords=coords, point_labels=labels, box=box,
                                               multimask_output=False, return_logits=True)
        torch = self.torch
        logits = self.predictor.model.postprocess_masks(
            torch.as_tensor(low_res[None], device=self.device), self.predictor.input_size,
            self.predictor.original_size)
        scores = torch.sigmoid(logits)[0, 0].detach().cpu().numpy().reshape(-1)
        if scores.size != h * w:
            raise WorkerError("model produced %d scores for %dx%d" % (scores.size, h, w), "shape")
        return {"scores": [float(s) for s in scores]}

    def finetune(self, req):
        h, w = self.set_image(req)
        torch = self.torch
        np = self.np
        for group in self.optimizer.param_groups:
            group["lr"] = float(req["lr"])
        p = self.predictor
        embedding = p.get_image_embedding().detach()
        self.optimizer.zero_grad()
        losses = []
        for item in req["classes"]:
            coords, labels, box = self.prompt_arrays(item)
            points = None
            if coords is not None:
                c = torch.as_tensor(p.transform.apply_coords(coords, p.original_size), device=self.device)
                points = (c[None], torch.as_tensor(labels, device=self.device)[None])
            boxes = None
            if box is not None:
                boxes = torch.as_tensor(p.transform.apply_boxes(box[None], p.original_size), device=self.device)
            sparse, dense = self.model.prompt_encoder(points=points, boxes=boxes, masks=None)
            low_res, _ = self.model.mask_decoder(
                image_embeddings=embedding,
                image_pe=self.model.prompt_encoder.get_dense_pe(),
                sparse_prompt_embeddings=sparse,
                dense_prompt_embeddings=dense,
                multimask_output=False)
            logits = self.model.postprocess_masks(low_res, p.input_size, p.original_size)[0, 0]
            target = torch.as_tensor(np.asarray(item["target"], dtype=np.float32).reshape(h, w), device=self.device)
            prob = torch.sigmoid(logits)
            dice = 1.0 - (2.0 * (prob * target).sum() + 1e-5) / (prob.sum() + target.sum() + 1e-5)
            bce = torch.nn.functional.binary_cross_entropy_with_logits(logits, target)
            losses.append(dice + bce)
        if not losses:
            return {"loss": 0.0}
        loss = torch.stack(losses).mean()
        loss.backward()
        self.optimizer.step()
        return {"loss": float(loss.detach().cpu())}


def main():
    worker = Worker()
    handlers = {"load": worker.load, "segment": worker.segment, "finetune": worker.finetune}
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            op = req.get("op")
            if op == "quit":
                break
            if op not in handlers:
                raise WorkerError("unknown op %r" % op)
            reply = {"ok": True}
            reply.update(handlers[op](req))
        except WorkerError as e:
            reply = {"ok": False, "error": str(e), "kind": e.kind}
        except Exception as e:  # noqa: BLE001, reported to the caller instead of killing the pipe
            reply = {"ok": False, "error": "%s: %s" % (type(e).__name__, e)}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
