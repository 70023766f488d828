import { GatewayApi, rateMBps } from "../api.js";
import { clear, h } from "../dom.js";
import type { ConsoleStore } from "../state.js";

/** Remote file browser over an attach session to a file-access agent,
 * with a CONTROL/STREAM transport toggle and a live MB/s readout. */
export class FileBrowserView {
  private sessionId: string | null = null;
  private agentSelect = h("select", { id: "fs-agent" }) as HTMLSelectElement;
  private pathInput = h("input", { type: "text", value: "." }) as HTMLInputElement;
  private transport = h("select", {}) as HTMLSelectElement;
  private listing = h("table", { class: "grid", "data-testid": "listing" });
  private rate = h("span", { class: "rate", "data-testid": "rate" });
  private note = h("pre", { class: "outcome" });

  constructor(private root: HTMLElement, private store: ConsoleStore, private api: GatewayApi) {
    store.subscribe(() => this.refreshAgents());
    this.render();
  }

  private refreshAgents(): void {
    const keep = this.agentSelect.value;
    clear(this.agentSelect);
    for (const agent of this.store.agentRows()) {
      if (agent.behaviorId.startsWith("file-access/") && agent.runState === "ACTIVE") {
        this.agentSelect.append(h("option", { value: agent.agentId }, [agent.agentId]));
      }
    }
    if (keep) this.agentSelect.value = keep;
  }

  private async session(): Promise<string> {
    if (this.sessionId) return this.sessionId;
    const opened = await this.api.openSession(this.agentSelect.value);
    if (!opened.session_id) throw new Error("agent is not attachable");
    this.sessionId = opened.session_id;
    return this.sessionId;
  }

  private async list(): Promise<void> {
    try {
      const sid = await this.session();
      const reply = await this.api.command(sid, { cmd: "list", path: this.pathInput.value });
      clear(this.listing);
      this.listing.append(
        h("tr", {}, [h("th", {}, ["name"]), h("th", {}, ["kind"]), h("th", {}, ["size"])]),
      );
      for (const entry of reply.reply.entries) {
        this.listing.append(
          h("tr", {}, [
            h("td", {}, [entry.name]),
            h("td", {}, [entry.kind]),
            h("td", {}, [String(entry.size)]),
          ]),
        );
      }
    } catch (err) {
      this.sessionId = null;
      this.note.textContent = String(err);
    }
  }

  private async download(): Promise<void> {
    try {
      const sid = await this.session();
      const result = await this.api.readFile(sid, this.pathInput.value, this.transport.value);
      this.rate.textContent = `${rateMBps(result.bytes, result.elapsedMs).toFixed(1)} MB/s (${this.transport.value})`;
      const blob = new Blob([(result.data ?? new Uint8Array()) as BlobPart]);
      const link = h("a", {
        href: URL.createObjectURL(blob),
        download: this.pathInput.value.split("/").pop() ?? "download",
      }) as HTMLAnchorElement;
      link.click();
      URL.revokeObjectURL(link.href);
    } catch (err) {
      this.sessionId = null;
      this.note.textContent = String(err);
    }
  }

  private async upload(file: File): Promise<void> {
    try {
      const sid = await this.session();
      const data = new Uint8Array(await file.arrayBuffer());
      const target = this.pathInput.value.endsWith("/") || this.pathInput.value === "."
        ? `${this.pathInput.value}/${file.name}`.replace(/^\.\//, "")
        : this.pathInput.value;
      const result = await this.api.writeFile(sid, target, data, this.transport.value);
      this.rate.textContent = `${rateMBps(result.bytes, result.elapsedMs).toFixed(1)} MB/s (${this.transport.value})`;
      await this.list();
    } catch (err) {
      this.sessionId = null;
      this.note.textContent = String(err);
    }
  }

  render(): void {
    clear(this.root);
    this.transport.append(h("option", { value: "control" }, ["control"]));
    this.transport.append(h("option", { value: "stream" }, ["stream"]));
    const listBtn = h("button", {}, ["List"]) as HTMLButtonElement;
    listBtn.onclick = () => void this.list();
    const downloadBtn = h("button", {}, ["Download"]) as HTMLButtonElement;
    downloadBtn.onclick = () => void this.download();
    const fileInput = h("input", { type: "file" }) as HTMLInputElement;
    fileInput.onchange = () => {
      if (fileInput.files?.[0]) void this.upload(fileInput.files[0]);
    };
    this.refreshAgents();
    this.root.append(
      h("div", { class: "row" }, [
        this.agentSelect,
        this.pathInput,
        this.transport,
        listBtn,
        downloadBtn,
        fileInput,
        this.rate,
      ]),
      this.listing,
      this.note,
    );
  }
}
