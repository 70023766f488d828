import type { GatewayApi } from "../api.js";
import { clear, h } from "../dom.js";
import type { ConsoleStore } from "../state.js";
import type { TravelEntry } from "../types.js";

/** Launch / move / recall forms plus the travel-log timeline. Every
 * mutation is a gateway POST; nothing here talks to stations directly. */
export class ControlsView {
  private behaviors: string[] = [];
  private outcome = h("pre", { class: "outcome", "data-testid": "controls-outcome" });

  constructor(private root: HTMLElement, private store: ConsoleStore, private api: GatewayApi) {
    store.subscribe(() => this.renderSelectors());
    void this.loadBehaviors();
    this.render();
  }

  private async loadBehaviors(): Promise<void> {
    try {
      this.behaviors = (await this.api.getBundles()).behaviors;
    } catch {
      this.behaviors = [];
    }
    this.render();
  }

  private say(obj: unknown): void {
    this.outcome.textContent =
      typeof obj === "string" ? obj : JSON.stringify(obj, null, 2);
  }

  private stationOptions(select: HTMLSelectElement): void {
    clear(select);
    for (const station of this.store.stationRows()) {
      select.append(h("option", { value: station.stationId }, [station.stationId]));
    }
  }

  private agentOptions(select: HTMLSelectElement): void {
    clear(select);
    for (const agent of this.store.agentRows()) {
      select.append(h("option", { value: agent.agentId }, [`${agent.agentId} (${agent.behaviorId})`]));
    }
  }

  private selects: HTMLSelectElement[] = [];

  private renderSelectors(): void {
    for (const select of this.selects) {
      const keep = select.value;
      if (select.dataset.kind === "station") this.stationOptions(select);
      else this.agentOptions(select);
      if (keep) select.value = keep;
    }
  }

  render(): void {
    clear(this.root);
    this.selects = [];

    const behaviorSelect = h("select", { id: "launch-behavior" }) as HTMLSelectElement;
    for (const behavior of this.behaviors) {
      behaviorSelect.append(h("option", { value: behavior }, [behavior]));
    }
    const destSelect = h("select", { id: "launch-dest", "data-kind": "station" }) as HTMLSelectElement;
    const params = h("textarea", { id: "launch-params", rows: "3" }) as HTMLTextAreaElement;
    params.value = "{}";
    const openAccess = h("input", { type: "checkbox", id: "launch-open" }) as HTMLInputElement;
    const launchBtn = h("button", {}, ["Launch"]) as HTMLButtonElement;
    launchBtn.onclick = async () => {
      try {
        const reply = await this.api.launch({
          behavior_id: behaviorSelect.value,
          dest: destSelect.value,
          params: JSON.parse(params.value || "{}"),
          open_access: openAccess.checked,
        });
        this.say(reply);
      } catch (err) {
        this.say(String(err));
      }
    };

    const moveAgent = h("select", { id: "move-agent", "data-kind": "agent" }) as HTMLSelectElement;
    const moveDest = h("select", { id: "move-dest", "data-kind": "station" }) as HTMLSelectElement;
    const moveBtn = h("button", {}, ["Move"]) as HTMLButtonElement;
    moveBtn.onclick = async () => {
      try {
        this.say(await this.api.move(moveAgent.value, moveDest.value));
      } catch (err) {
        this.say(String(err));
      }
    };

    const recallAgent = h("select", { id: "recall-agent", "data-kind": "agent" }) as HTMLSelectElement;
    const recallBtn = h("button", {}, ["Recall"]) as HTMLButtonElement;
    recallBtn.onclick = async () => {
      try {
        const opened = await this.api.openSession(recallAgent.value);
        if (opened.session_id) {
          await this.api.command(opened.session_id, { cmd: "recall" });
          await this.api.closeSession(opened.session_id);
          this.say("recall sent; agent will head home and finish");
        } else {
          this.say(opened);
        }
      } catch (err) {
        this.say(String(err));
      }
    };

    const logAgent = h("select", { id: "log-agent", "data-kind": "agent" }) as HTMLSelectElement;
    const logBtn = h("button", {}, ["Travel log"]) as HTMLButtonElement;
    const timeline = h("div", { class: "timeline", "data-testid": "timeline" });
    logBtn.onclick = async () => {
      try {
        const reply = await this.api.getAgentLog(logAgent.value);
        clear(timeline);
        for (const entry of reply.travel_log as TravelEntry[]) {
          const dep = entry.departure ? new Date(entry.departure).toISOString() : "resident";
          timeline.append(
            h("div", { class: "hop" }, [
              `${entry.station_id}: ${new Date(entry.arrival).toISOString()} → ${dep}`,
            ]),
          );
        }
      } catch (err) {
        this.say(String(err));
      }
    };

    this.selects.push(destSelect, moveAgent, moveDest, recallAgent, logAgent);
    this.renderSelectors();

    this.root.append(
      h("h3", {}, ["Launch"]),
      h("div", { class: "row" }, [behaviorSelect, destSelect, openAccess, "open access"]),
      params,
      launchBtn,
      h("h3", {}, ["Move / recall"]),
      h("div", { class: "row" }, [moveAgent, moveDest, moveBtn, recallBtn]),
      h("h3", {}, ["Travel log"]),
      h("div", { class: "row" }, [logAgent, logBtn]),
      timeline,
      this.outcome,
    );
  }
}
