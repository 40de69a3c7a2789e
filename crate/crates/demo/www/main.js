import init, { angle, route, schedule } from "./pkg/sector_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function call(f, req, out) {
  try {
    out.classList.remove("err");
    return JSON.parse(f(JSON.stringify(req)));
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e);
    return null;
  }
}

const palette = ["#1b6ca8", "#e07b22", "#2a9d4b", "#8e44ad", "#c0392b", "#16a085", "#7f8c8d", "#d4ac0d"];

function runAngle() {
  const planted = num("a-planted");
  const req = {
    seed: num("a-seed"),
    windows: num("a-windows"),
    planted_window: planted >= 0 ? planted : null,
    k: num("a-k"),
    z: num("a-z"),
  };
  const out = $("a-out");
  const r = call(angle, req, out);
  if (!r) return;

  const c = $("a-delta").getContext("2d");
  const { width: w, height: h } = c.canvas;
  c.clearRect(0, 0, w, h);
  const deltas = r.windows.map((x) => x.delta ?? 0);
  const top = Math.max(1e-9, ...deltas);
  const bw = w / r.windows.length;
  r.windows.forEach((win, i) => {
    const bh = (h - 20) * Math.log1p(deltas[i]) / Math.log1p(top);
    c.fillStyle = win.flagged ? "#c0392b" : "#1b6ca8";
    c.fillRect(i * bw + 1, h - 14 - bh, bw - 2, bh);
    c.fillStyle = "#444";
    c.font = "10px sans-serif";
    if (r.windows.length <= 60 || i % 5 === 0) c.fillText(String(win.index), i * bw + 2, h - 2);
  });

  const m = $("a-map").getContext("2d");
  const S = m.canvas.width;
  m.clearRect(0, 0, S, S);
  const [x0, x1, y0, y1] = r.bounds;
  const px = (x) => ((x - x0) / (x1 - x0)) * S;
  const py = (y) => S - ((y - y0) / (y1 - y0)) * S;
  if (r.scores.length) {
    const top = Math.max(...r.scores);
    const cell = S / r.grid;
    r.scores.forEach((s, i) => {
      const a = top > 0 ? s / top : 0;
      m.fillStyle = `rgba(192, 57, 43, ${a.toFixed(3)})`;
      m.fillRect((i % r.grid) * cell, Math.floor(i / r.grid) * cell, cell + 1, cell + 1);
    });
  }
  for (const win of r.windows) {
    win.centers.forEach((ctr, j) => {
      const emergent = win.emergent.includes(j);
      m.fillStyle = emergent ? "#000" : "rgba(27, 108, 168, 0.35)";
      m.beginPath();
      m.arc(px(ctr[0]), py(ctr[1]), emergent ? 4 : 2.5, 0, 2 * Math.PI);
      m.fill();
    });
  }
  const flagged = r.flagged.length ? r.flagged.join(", ") : "none";
  out.textContent = `flagged windows: ${flagged}\nemergent centers: ${r.windows
    .flatMap((w) => w.emergent.map((j) => `[${w.centers[j].map((v) => v.toFixed(2)).join(", ")}] @${w.index}`))
    .join("  ") || "none"}`;
}

function runRoute() {
  const req = { nodes: num("r-nodes"), name: $("r-name").value, from: num("r-from") };
  const out = $("r-out");
  const r = call(route, req, out);
  if (!r) return;
  const c = $("r-ring").getContext("2d");
  const S = c.canvas.width;
  const R = S / 2 - 30;
  const at = (f) => [S / 2 + R * Math.sin(2 * Math.PI * f), S / 2 - R * Math.cos(2 * Math.PI * f)];
  c.clearRect(0, 0, S, S);
  c.strokeStyle = "#bbb";
  c.beginPath();
  c.arc(S / 2, S / 2, R, 0, 2 * Math.PI);
  c.stroke();
  const pos = new Map(r.members.map((m) => [m.addr, at(m.at)]));
  c.strokeStyle = "rgba(27, 108, 168, 0.3)";
  const start = pos.get(r.path[0]);
  for (const f of r.fingers) {
    const p = pos.get(f);
    c.beginPath();
    c.moveTo(...start);
    c.lineTo(...p);
    c.stroke();
  }
  c.strokeStyle = "#e07b22";
  c.lineWidth = 2;
  c.beginPath();
  c.moveTo(...start);
  for (const a of [...r.path.slice(1), r.owner]) c.lineTo(...pos.get(a));
  c.stroke();
  c.lineWidth = 1;
  for (const m of r.members) {
    const [x, y] = pos.get(m.addr);
    c.fillStyle = m.addr === r.owner ? "#2a9d4b" : r.path.includes(m.addr) ? "#e07b22" : "#1b6ca8";
    c.beginPath();
    c.arc(x, y, 5, 0, 2 * Math.PI);
    c.fill();
  }
  const [kx, ky] = at(r.key_at);
  c.fillStyle = "#000";
  c.fillRect(kx - 3, ky - 3, 6, 6);
  out.textContent =
    `key ${r.key}\nowner ${r.owner}\npath ${r.path.join(" -> ")} (${r.hops} hops, bound ${r.hop_bound})`;
}

function runSchedule() {
  const req = {
    seed: num("s-seed"),
    nodes: num("s-nodes"),
    spes_per_node: num("s-spes"),
    files: num("s-files"),
    replicas: num("s-replicas"),
    segments_per_file: num("s-segs"),
    remote_cost: num("s-cost"),
  };
  const out = $("s-out");
  const r = call(schedule, req, out);
  if (!r) return;
  const c = $("s-gantt").getContext("2d");
  const lanes = r.spe_node.length;
  c.canvas.height = Math.max(120, lanes * 26 + 30);
  const { width: w, height: h } = c.canvas;
  c.clearRect(0, 0, w, h);
  const left = 90;
  const scale = (w - left - 10) / r.makespan;
  const lane = (h - 30) / lanes;
  c.font = "11px sans-serif";
  r.spe_node.forEach((node, spe) => {
    c.fillStyle = "#444";
    c.fillText(`node ${node} slot ${spe}`, 4, spe * lane + lane / 2 + 4);
  });
  for (const b of r.bars) {
    const x = left + b.start * scale;
    const y = b.spe * lane + 3;
    const bw = (b.end - b.start) * scale;
    c.fillStyle = palette[b.file % palette.length];
    c.fillRect(x, y, bw - 1, lane - 6);
    if (!b.local) {
      c.strokeStyle = "rgba(255,255,255,0.7)";
      for (let i = -lane; i < bw; i += 6) {
        c.beginPath();
        c.moveTo(x + i, y + lane - 6);
        c.lineTo(x + i + lane - 6, y);
        c.stroke();
      }
    }
    c.fillStyle = "#fff";
    if (bw > 24) c.fillText(`f${b.file}`, x + 3, y + lane / 2 + 1);
  }
  c.fillStyle = "#444";
  c.fillText("0", left, h - 8);
  c.fillText(r.makespan.toFixed(2), w - 40, h - 8);
  out.textContent = `makespan ${r.makespan.toFixed(3)}, ${(100 * r.local_fraction).toFixed(0)}% of segments read locally\n` +
    r.file_nodes.map((n, f) => `f${f} on node ${n.join(",")}`).join("  ");
}

await init();
$("a-run").onclick = runAngle;
$("r-run").onclick = runRoute;
$("s-run").onclick = runSchedule;
runAngle();
runRoute();
runSchedule();
